//! Character-level encoder-decoder with a Gaussian lemma latent and
//! attention over tag-label embeddings.
//!
//! All operations are batched: a batch of `B` words is processed as `B`
//! rows, padded time-major to the longest word, with masked state updates
//! for the encoder and masked losses for the decoder.

use msved_tensor::{Gradients, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{BOS, EOS, PAD};
use crate::error::{MsvedError, Result};
use crate::rng::{stream, Purpose};
use crate::stochastic::{decoder_input_dropout, GaussianPosterior};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub char_dim: usize,
    pub tag_dim: usize,
    pub hidden: usize,
    pub latent: usize,
    pub mlp_hidden: usize,
    pub attention_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            char_dim: 300,
            tag_dim: 200,
            hidden: 256,
            latent: 150,
            mlp_hidden: 256,
            attention_dim: 128,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.char_dim,
            self.tag_dim,
            self.hidden,
            self.latent,
            self.mlp_hidden,
            self.attention_dim,
        ];
        if dims.contains(&0) {
            return Err(MsvedError::Config(format!("model dimensions must be positive: {self:?}")));
        }
        Ok(())
    }

    /// Width of the encoder summary `[forward final; backward final]`.
    pub fn encoding_dim(&self) -> usize {
        2 * self.hidden
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GruSlots {
    pub wx: usize,
    pub wh: usize,
    pub bx: usize,
    pub bh: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MlpSlots {
    pub hidden_w: usize,
    pub hidden_b: usize,
    pub out_w: usize,
    pub out_b: usize,
}

/// Positions of each parameter group in [`ModelParams::tensors`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub char_emb: usize,
    pub tag_emb: usize,
    pub enc_fwd: GruSlots,
    pub enc_bwd: GruSlots,
    pub z_mean: MlpSlots,
    pub z_log_var: MlpSlots,
    pub cls_hidden_w: usize,
    pub cls_hidden_b: usize,
    /// Output weight and bias per tag category.
    pub cls_out: Vec<(usize, usize)>,
    pub dec_init_w: usize,
    pub dec_init_b: usize,
    pub att_state: usize,
    pub att_tag: usize,
    pub att_score: usize,
    pub dec: GruSlots,
    pub out_w: usize,
    pub out_b: usize,
}

#[derive(Clone, Copy)]
enum Init {
    Glorot,
    Zero,
}

struct Spec {
    name: String,
    rows: usize,
    cols: usize,
    init: Init,
}

#[derive(Default)]
struct LayoutBuilder {
    specs: Vec<Spec>,
}

impl LayoutBuilder {
    fn add(&mut self, name: impl Into<String>, rows: usize, cols: usize, init: Init) -> usize {
        self.specs.push(Spec {
            name: name.into(),
            rows,
            cols,
            init,
        });
        self.specs.len() - 1
    }

    fn gru(&mut self, prefix: &str, input: usize, hidden: usize) -> GruSlots {
        GruSlots {
            wx: self.add(format!("{prefix}.wx"), input, 3 * hidden, Init::Glorot),
            wh: self.add(format!("{prefix}.wh"), hidden, 3 * hidden, Init::Glorot),
            bx: self.add(format!("{prefix}.bx"), 1, 3 * hidden, Init::Zero),
            bh: self.add(format!("{prefix}.bh"), 1, 3 * hidden, Init::Zero),
        }
    }

    fn mlp(&mut self, prefix: &str, input: usize, hidden: usize, out: usize, out_init: Init) -> MlpSlots {
        MlpSlots {
            hidden_w: self.add(format!("{prefix}.hidden_w"), input, hidden, Init::Glorot),
            hidden_b: self.add(format!("{prefix}.hidden_b"), 1, hidden, Init::Zero),
            out_w: self.add(format!("{prefix}.out_w"), hidden, out, out_init),
            out_b: self.add(format!("{prefix}.out_b"), 1, out, Init::Zero),
        }
    }
}

fn build_layout(config: &ModelConfig, vocab_size: usize, tag_sizes: &[usize]) -> (Layout, Vec<Spec>) {
    let c = config;
    let enc = c.encoding_dim();
    let k = tag_sizes.len();
    let mut b = LayoutBuilder::default();
    let char_emb = b.add("char_emb", vocab_size, c.char_dim, Init::Glorot);
    let tag_emb = b.add("tag_emb", tag_sizes.iter().sum(), c.tag_dim, Init::Glorot);
    let enc_fwd = b.gru("enc_fwd", c.char_dim, c.hidden);
    let enc_bwd = b.gru("enc_bwd", c.char_dim, c.hidden);
    let z_mean = b.mlp("z_mean", enc, c.mlp_hidden, c.latent, Init::Zero);
    let z_log_var = b.mlp("z_log_var", enc, c.mlp_hidden, c.latent, Init::Zero);
    let cls_hidden_w = b.add("cls.hidden_w", enc, k * c.mlp_hidden, Init::Glorot);
    let cls_hidden_b = b.add("cls.hidden_b", 1, k * c.mlp_hidden, Init::Zero);
    let cls_out = tag_sizes
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            (
                b.add(format!("cls.{i}.out_w"), c.mlp_hidden, n, Init::Zero),
                b.add(format!("cls.{i}.out_b"), 1, n, Init::Zero),
            )
        })
        .collect();
    let dec_init_w = b.add("dec_init.w", c.latent, c.hidden, Init::Glorot);
    let dec_init_b = b.add("dec_init.b", 1, c.hidden, Init::Zero);
    let att_state = b.add("att.state", c.hidden, c.attention_dim, Init::Glorot);
    let att_tag = b.add("att.tag", c.tag_dim, c.attention_dim, Init::Glorot);
    let att_score = b.add("att.score", c.attention_dim, 1, Init::Glorot);
    let dec = b.gru("dec", c.char_dim + c.latent + c.tag_dim, c.hidden);
    let out_w = b.add("out.w", c.hidden, vocab_size, Init::Glorot);
    let out_b = b.add("out.b", 1, vocab_size, Init::Zero);
    let layout = Layout {
        char_emb,
        tag_emb,
        enc_fwd,
        enc_bwd,
        z_mean,
        z_log_var,
        cls_hidden_w,
        cls_hidden_b,
        cls_out,
        dec_init_w,
        dec_init_b,
        att_state,
        att_tag,
        att_score,
        dec,
        out_w,
        out_b,
    };
    (layout, b.specs)
}

/// Every learnable tensor of the model plus the dimensions it was built for.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    vocab_size: usize,
    tag_sizes: Vec<usize>,
    layout: Layout,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ModelParams {
    /// Fan-based uniform initialization for matrices, zeros for biases and
    /// for the output layers of the latent and tag inference networks.
    pub fn new(config: ModelConfig, vocab_size: usize, tag_sizes: &[usize], seed: u64) -> Result<Self> {
        Self::check_dims(&config, vocab_size, tag_sizes)?;
        let (layout, specs) = build_layout(&config, vocab_size, tag_sizes);
        let mut rng = stream(seed, Purpose::Init, 0);
        let mut names = Vec::with_capacity(specs.len());
        let mut tensors = Vec::with_capacity(specs.len());
        for s in specs {
            let n = s.rows * s.cols;
            let data = match s.init {
                Init::Zero => vec![0.0; n],
                Init::Glorot => {
                    let a = (6.0 / (s.rows + s.cols) as f64).sqrt();
                    (0..n).map(|_| rng.random_range(-a..a)).collect()
                }
            };
            names.push(s.name);
            tensors.push(Tensor::matrix(s.rows, s.cols, data).with_requires_grad(true));
        }
        Ok(ModelParams {
            config,
            vocab_size,
            tag_sizes: tag_sizes.to_vec(),
            layout,
            names,
            tensors,
        })
    }

    /// Reassembles parameters from named tensors, checking names and shapes.
    pub fn from_named(
        config: ModelConfig,
        vocab_size: usize,
        tag_sizes: &[usize],
        mut named: Vec<(String, Tensor)>,
    ) -> Result<Self> {
        Self::check_dims(&config, vocab_size, tag_sizes)?;
        let (layout, specs) = build_layout(&config, vocab_size, tag_sizes);
        if named.len() != specs.len() {
            return Err(MsvedError::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                specs.len(),
                named.len()
            )));
        }
        let mut names = Vec::with_capacity(specs.len());
        let mut tensors = Vec::with_capacity(specs.len());
        for (s, (name, t)) in specs.iter().zip(named.drain(..)) {
            if name != s.name || t.shape() != [s.rows, s.cols] {
                return Err(MsvedError::Checkpoint(format!(
                    "parameter `{name}` {:?} does not match expected `{}` [{}, {}]",
                    t.shape(),
                    s.name,
                    s.rows,
                    s.cols
                )));
            }
            names.push(name);
            tensors.push(t.with_requires_grad(true));
        }
        Ok(ModelParams {
            config,
            vocab_size,
            tag_sizes: tag_sizes.to_vec(),
            layout,
            names,
            tensors,
        })
    }

    fn check_dims(config: &ModelConfig, vocab_size: usize, tag_sizes: &[usize]) -> Result<()> {
        config.validate()?;
        if vocab_size <= crate::corpus::NUM_SPECIALS {
            return Err(MsvedError::Config("vocabulary has no symbols".into()));
        }
        if tag_sizes.is_empty() || tag_sizes.contains(&0) {
            return Err(MsvedError::Schema(format!("invalid tag category sizes {tag_sizes:?}")));
        }
        Ok(())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn tag_sizes(&self) -> &[usize] {
        &self.tag_sizes
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Row offset of each category's block inside the tag embedding table.
    pub fn tag_offsets(&self) -> Vec<usize> {
        self.tag_sizes
            .iter()
            .scan(0, |acc, &n| {
                let o = *acc;
                *acc += n;
                Some(o)
            })
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Adds per-tensor gradients into the tensors' gradient slots.
    pub fn accumulate_grads(&mut self, grads: &[Vec<f64>]) -> Result<()> {
        if grads.len() != self.tensors.len() {
            return Err(MsvedError::Contract("gradient list does not match parameters".into()));
        }
        for (t, g) in self.tensors.iter_mut().zip(grads) {
            t.accumulate_grad(g)?;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn bind<'p>(&'p self, tape: &mut Tape<'p>) -> Net<'p> {
        let vars = self.tensors.iter().map(|t| tape.param(t)).collect();
        Net { params: self, vars }
    }
}

#[derive(Debug, Clone, Copy)]
struct GruVars {
    wx: Var,
    wh: Var,
    bx: Var,
    bh: Var,
}

/// Result of running the bidirectional encoder over a batch.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// `B x 2H` concatenation of forward and backward final states.
    pub summary: Var,
    /// Forward-direction states per position (rows past a word's end hold
    /// its final state).
    pub forward_states: Vec<Var>,
}

/// Per-sequence decoder conditioning: projected latent and tag memory.
#[derive(Debug, Clone)]
pub struct DecoderContext {
    /// `B x 3H` contribution of z to the decoder GRU input.
    pub latent_input: Var,
    /// One `B x tag_dim` vector per category.
    pub tags: Vec<Var>,
    /// Tag vectors projected into attention space, `B x attention_dim`.
    pub tag_keys: Vec<Var>,
}

#[derive(Debug, Clone, Copy)]
pub struct StepOutput {
    pub logits: Var,
    pub state: Var,
    /// `B x K` attention weights over tag categories.
    pub attention: Var,
}

/// Parameters bound to a tape.
pub struct Net<'p> {
    params: &'p ModelParams,
    vars: Vec<Var>,
}

impl<'p> Net<'p> {
    pub fn params(&self) -> &'p ModelParams {
        self.params
    }

    pub fn var(&self, slot: usize) -> Var {
        self.vars[slot]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradient for every parameter, zeros where the loss did not depend on it.
    pub fn collect_grads(&self, grads: &Gradients) -> Vec<Vec<f64>> {
        self.vars
            .iter()
            .zip(self.params.tensors())
            .map(|(&v, t)| grads.get(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect()
    }

    fn gru(&self, s: GruSlots) -> GruVars {
        GruVars {
            wx: self.var(s.wx),
            wh: self.var(s.wh),
            bx: self.var(s.bx),
            bh: self.var(s.bh),
        }
    }

    fn layout(&self) -> &'p Layout {
        &self.params.layout
    }

    fn hidden(&self) -> usize {
        self.params.config.hidden
    }

    /// One GRU update from a precomputed input projection `gx = x Wx + bx`.
    fn gru_cell(&self, tape: &mut Tape<'p>, g: GruVars, gx: Var, h: Var) -> Result<Var> {
        let hd = self.hidden();
        let gh = tape.affine(h, g.wh, g.bh)?;
        let gx_rz = tape.slice_cols(gx, 0, 2 * hd)?;
        let gh_rz = tape.slice_cols(gh, 0, 2 * hd)?;
        let pre = tape.add(gx_rz, gh_rz)?;
        let rz = tape.sigmoid(pre)?;
        let reset = tape.slice_cols(rz, 0, hd)?;
        let update = tape.slice_cols(rz, hd, hd)?;
        let gx_n = tape.slice_cols(gx, 2 * hd, hd)?;
        let gh_n = tape.slice_cols(gh, 2 * hd, hd)?;
        let gated = tape.mul(reset, gh_n)?;
        let pre_n = tape.add(gx_n, gated)?;
        let cand = tape.tanh(pre_n)?;
        let diff = tape.sub(h, cand)?;
        let keep = tape.mul(update, diff)?;
        Ok(tape.add(cand, keep)?)
    }

    /// Runs one direction over time-major padded input; returns the final
    /// state of every row and the per-position states.
    fn run_direction(&self, tape: &mut Tape<'p>, g: GruVars, words: &[Vec<usize>]) -> Result<(Var, Vec<Var>)> {
        let b = words.len();
        let steps = words.iter().map(Vec::len).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(steps * b);
        for t in 0..steps {
            ids.extend(words.iter().map(|w| w.get(t).copied().unwrap_or(PAD)));
        }
        let emb = tape.lookup(self.var(self.layout().char_emb), &ids)?;
        let gx_all = tape.affine(emb, g.wx, g.bx)?;
        let mut h = tape.constant(Tensor::zeros(b, self.hidden()));
        let mut states = Vec::with_capacity(steps);
        for t in 0..steps {
            let gx = tape.slice_rows(gx_all, t * b, b)?;
            let next = self.gru_cell(tape, g, gx, h)?;
            let mask: Vec<bool> = words.iter().map(|w| t < w.len()).collect();
            h = if mask.iter().all(|&m| m) {
                next
            } else {
                tape.select_rows(&mask, next, h)?
            };
            states.push(h);
        }
        Ok((h, states))
    }

    pub fn encode(&self, tape: &mut Tape<'p>, words: &[&[usize]]) -> Result<EncoderOutput> {
        if words.is_empty() {
            return Err(MsvedError::Contract("empty batch".into()));
        }
        let v = self.params.vocab_size;
        for w in words {
            if w.is_empty() {
                return Err(MsvedError::Contract("cannot encode an empty word".into()));
            }
            if let Some(&bad) = w.iter().find(|&&c| c >= v) {
                return Err(MsvedError::Contract(format!("symbol {bad} outside vocabulary of {v}")));
            }
        }
        let forward: Vec<Vec<usize>> = words.iter().map(|w| w.to_vec()).collect();
        let backward: Vec<Vec<usize>> = words.iter().map(|w| w.iter().rev().copied().collect()).collect();
        let (hf, forward_states) = self.run_direction(tape, self.gru(self.layout().enc_fwd), &forward)?;
        let (hb, _) = self.run_direction(tape, self.gru(self.layout().enc_bwd), &backward)?;
        let summary = tape.concat_cols(&[hf, hb])?;
        Ok(EncoderOutput {
            summary,
            forward_states,
        })
    }

    fn mlp(&self, tape: &mut Tape<'p>, s: MlpSlots, x: Var) -> Result<Var> {
        let h = tape.affine(x, self.var(s.hidden_w), self.var(s.hidden_b))?;
        let h = tape.tanh(h)?;
        Ok(tape.affine(h, self.var(s.out_w), self.var(s.out_b))?)
    }

    pub fn infer_z(&self, tape: &mut Tape<'p>, summary: Var) -> Result<GaussianPosterior> {
        Ok(GaussianPosterior {
            mu: self.mlp(tape, self.layout().z_mean, summary)?,
            log_var: self.mlp(tape, self.layout().z_log_var, summary)?,
        })
    }

    /// Log-probabilities `B x N_k` for each tag category.
    pub fn classify_tags(&self, tape: &mut Tape<'p>, summary: Var) -> Result<Vec<Var>> {
        let l = self.layout();
        let m = self.params.config.mlp_hidden;
        let h = tape.affine(summary, self.var(l.cls_hidden_w), self.var(l.cls_hidden_b))?;
        let h = tape.tanh(h)?;
        let mut out = Vec::with_capacity(l.cls_out.len());
        for (k, &(w, b)) in l.cls_out.iter().enumerate() {
            let hk = tape.slice_cols(h, k * m, m)?;
            let logits = tape.affine(hk, self.var(w), self.var(b))?;
            out.push(tape.log_softmax(logits)?);
        }
        Ok(out)
    }

    /// Embeddings of observed labels, one `B x tag_dim` matrix per category.
    pub fn hard_tags(&self, tape: &mut Tape<'p>, labels: &[&[usize]]) -> Result<Vec<Var>> {
        let sizes = &self.params.tag_sizes;
        let offsets = self.params.tag_offsets();
        let table = self.var(self.layout().tag_emb);
        let mut out = Vec::with_capacity(sizes.len());
        for (k, (&n, &o)) in sizes.iter().zip(&offsets).enumerate() {
            let mut ids = Vec::with_capacity(labels.len());
            for l in labels {
                if l.len() != sizes.len() || l[k] >= n {
                    return Err(MsvedError::Contract(format!("label vector {l:?} does not fit sizes {sizes:?}")));
                }
                ids.push(o + l[k]);
            }
            out.push(tape.lookup(table, &ids)?);
        }
        Ok(out)
    }

    /// Mixtures of each category's label embeddings weighted by relaxed
    /// samples (`B x N_k` each).
    pub fn soft_tags(&self, tape: &mut Tape<'p>, weights: &[Var]) -> Result<Vec<Var>> {
        let sizes = &self.params.tag_sizes;
        if weights.len() != sizes.len() {
            return Err(MsvedError::Contract("one weight matrix per category expected".into()));
        }
        let offsets = self.params.tag_offsets();
        let table = self.var(self.layout().tag_emb);
        let mut out = Vec::with_capacity(sizes.len());
        for ((&n, &o), &w) in sizes.iter().zip(&offsets).zip(weights) {
            let block = tape.slice_rows(table, o, n)?;
            out.push(tape.matmul(w, block)?);
        }
        Ok(out)
    }

    /// Decoder input weight split into character, latent and context blocks.
    fn decoder_input_blocks(&self, tape: &mut Tape<'p>) -> Result<(Var, Var, Var)> {
        let c = &self.params.config;
        let wx = self.var(self.layout().dec.wx);
        Ok((
            tape.slice_rows(wx, 0, c.char_dim)?,
            tape.slice_rows(wx, c.char_dim, c.latent)?,
            tape.slice_rows(wx, c.char_dim + c.latent, c.tag_dim)?,
        ))
    }

    /// Initial decoder state `tanh(z W + b)` and the conditioning shared by
    /// every step.
    pub fn decoder_context(&self, tape: &mut Tape<'p>, z: Var, tags: Vec<Var>) -> Result<(DecoderContext, Var)> {
        let l = self.layout();
        let (_, w_z, _) = self.decoder_input_blocks(tape)?;
        let latent_input = tape.matmul(z, w_z)?;
        let mut tag_keys = Vec::with_capacity(tags.len());
        for &t in &tags {
            tag_keys.push(tape.matmul(t, self.var(l.att_tag))?);
        }
        let h0 = tape.affine(z, self.var(l.dec_init_w), self.var(l.dec_init_b))?;
        let h0 = tape.tanh(h0)?;
        Ok((
            DecoderContext {
                latent_input,
                tags,
                tag_keys,
            },
            h0,
        ))
    }

    /// Additive attention of `state` over the tag vectors; returns the
    /// context vector and the `B x K` weights.
    pub fn tag_attention(&self, tape: &mut Tape<'p>, state: Var, cx: &DecoderContext) -> Result<(Var, Var)> {
        let l = self.layout();
        let query = tape.matmul(state, self.var(l.att_state))?;
        let mut scores = Vec::with_capacity(cx.tags.len());
        for &key in &cx.tag_keys {
            let a = tape.add(query, key)?;
            let a = tape.tanh(a)?;
            scores.push(tape.matmul(a, self.var(l.att_score))?);
        }
        let scores = tape.concat_cols(&scores)?;
        let weights = tape.softmax(scores, 1.0)?;
        let mut context = None;
        for (k, &tag) in cx.tags.iter().enumerate() {
            let w = tape.slice_cols(weights, k, 1)?;
            let part = tape.scale_rows(tag, w)?;
            context = Some(match context {
                None => part,
                Some(acc) => tape.add(acc, part)?,
            });
        }
        let context = context.ok_or_else(|| MsvedError::Contract("attention over zero tags".into()))?;
        Ok((context, weights))
    }

    /// One decoder step from the embedded previous characters (`B x char_dim`).
    pub fn decode_step(&self, tape: &mut Tape<'p>, prev: Var, state: Var, cx: &DecoderContext) -> Result<StepOutput> {
        let l = self.layout();
        let (w_e, _, w_c) = self.decoder_input_blocks(tape)?;
        let g = self.gru(l.dec);
        let ex = tape.affine(prev, w_e, g.bx)?;
        let (next, attention) = self.advance(tape, ex, state, cx, w_c, g)?;
        let logits = tape.affine(next, self.var(l.out_w), self.var(l.out_b))?;
        Ok(StepOutput {
            logits,
            state: next,
            attention,
        })
    }

    /// New decoder state and attention weights.
    fn advance(
        &self,
        tape: &mut Tape<'p>,
        char_input: Var,
        state: Var,
        cx: &DecoderContext,
        w_c: Var,
        g: GruVars,
    ) -> Result<(Var, Var)> {
        let (context, attention) = self.tag_attention(tape, state, cx)?;
        let cin = tape.matmul(context, w_c)?;
        let gx = tape.add(char_input, cx.latent_input)?;
        let gx = tape.add(gx, cin)?;
        let next = self.gru_cell(tape, g, gx, state)?;
        Ok((next, attention))
    }

    pub fn embed(&self, tape: &mut Tape<'p>, ids: &[usize]) -> Result<Var> {
        Ok(tape.lookup(self.var(self.layout().char_emb), ids)?)
    }

    /// Teacher-forced negative log-likelihood of `targets` (each followed by
    /// EOS), summed over characters and batch rows.
    ///
    /// `keep` is the decoder-input dropout mask, time-major with
    /// `(longest target + 1) * B` entries; `None` keeps every input.
    pub fn reconstruction_nll(
        &self,
        tape: &mut Tape<'p>,
        cx: &DecoderContext,
        h0: Var,
        targets: &[&[usize]],
        keep: Option<&[f64]>,
    ) -> Result<Var> {
        let b = targets.len();
        let steps = decode_steps(targets);
        let mut inputs = Vec::with_capacity(steps * b);
        let mut gold = Vec::with_capacity(steps * b);
        for t in 0..steps {
            for w in targets {
                inputs.push(if t == 0 { BOS } else { w.get(t - 1).copied().unwrap_or(PAD) });
                gold.push(match t.cmp(&w.len()) {
                    std::cmp::Ordering::Less => Some(w[t]),
                    std::cmp::Ordering::Equal => Some(EOS),
                    std::cmp::Ordering::Greater => None,
                });
            }
        }
        let l = self.layout();
        let (w_e, _, w_c) = self.decoder_input_blocks(tape)?;
        let g = self.gru(l.dec);
        let mut emb = self.embed(tape, &inputs)?;
        if let Some(keep) = keep {
            if keep.len() != inputs.len() {
                return Err(MsvedError::Contract(format!(
                    "dropout mask has {} entries, expected {}",
                    keep.len(),
                    inputs.len()
                )));
            }
            emb = decoder_input_dropout(tape, emb, keep)?;
        }
        let ex_all = tape.affine(emb, w_e, g.bx)?;
        let mut h = h0;
        let mut states = Vec::with_capacity(steps);
        for t in 0..steps {
            let ex = tape.slice_rows(ex_all, t * b, b)?;
            h = self.advance(tape, ex, h, cx, w_c, g)?.0;
            states.push(h);
        }
        let all = tape.concat_rows(&states)?;
        let logits = tape.affine(all, self.var(l.out_w), self.var(l.out_b))?;
        let ce = tape.masked_cross_entropy(logits, &gold)?;
        Ok(tape.sum_all(ce)?)
    }
}

/// Decoder steps needed to emit the longest target plus EOS.
pub fn decode_steps(targets: &[&[usize]]) -> usize {
    targets.iter().map(|w| w.len()).max().unwrap_or(0) + 1
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelParams {
        let config = ModelConfig {
            char_dim: 5,
            tag_dim: 4,
            hidden: 6,
            latent: 3,
            mlp_hidden: 7,
            attention_dim: 4,
        };
        ModelParams::new(config, 8, &[2, 3], 5).unwrap()
    }

    #[test]
    fn default_dimensions() {
        let c = ModelConfig::default();
        assert_eq!(c.encoding_dim(), 512);
        assert_eq!(c.latent, 150);
        let p = ModelParams::new(c, 10, &[3, 4], 0).unwrap();
        let l = p.layout();
        assert_eq!(p.tensors()[l.char_emb].shape(), &[10, 300]);
        assert_eq!(p.tensors()[l.tag_emb].shape(), &[7, 200]);
        assert_eq!(p.tensors()[l.z_mean.out_w].shape(), &[256, 150]);
        assert_eq!(p.tensors()[l.dec.wx].shape(), &[650, 768]);
    }

    #[test]
    fn single_character_word_and_summary_width() {
        let p = tiny();
        let mut tape = Tape::new();
        let net = p.bind(&mut tape);
        let enc = net.encode(&mut tape, &[&[5]]).unwrap();
        assert_eq!(tape.value(enc.summary).shape(), &[1, 12]);
        assert!(net.encode(&mut tape, &[&[]]).is_err());
        assert!(net.encode(&mut tape, &[&[9]]).is_err());
    }

    #[test]
    fn fresh_model_starts_at_the_prior() {
        let p = tiny();
        let mut tape = Tape::new();
        let net = p.bind(&mut tape);
        let enc = net.encode(&mut tape, &[&[4, 5, 6], &[7]]).unwrap();
        let post = net.infer_z(&mut tape, enc.summary).unwrap();
        assert!(tape.value(post.mu).data().iter().all(|&v| v == 0.0));
        assert!(tape.value(post.log_var).data().iter().all(|&v| v == 0.0));
        let q = net.classify_tags(&mut tape, enc.summary).unwrap();
        assert_eq!(q.len(), 2);
        for (lp, n) in q.iter().zip([2.0f64, 3.0]) {
            for v in tape.value(*lp).data() {
                assert!((v + n.ln()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn padding_does_not_change_a_words_encoding() {
        let p = tiny();
        let mut tape = Tape::new();
        let net = p.bind(&mut tape);
        let alone = net.encode(&mut tape, &[&[4, 5]]).unwrap();
        let padded = net.encode(&mut tape, &[&[4, 5], &[6, 7, 4, 5]]).unwrap();
        let a = tape.value(alone.summary).row_slice(0).to_vec();
        let b = tape.value(padded.summary).row_slice(0).to_vec();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn attention_special_cases() {
        let config = ModelConfig {
            char_dim: 3,
            tag_dim: 4,
            hidden: 5,
            latent: 2,
            mlp_hidden: 3,
            attention_dim: 3,
        };
        let one = ModelParams::new(config, 6, &[3], 1).unwrap();
        let mut tape = Tape::new();
        let net = one.bind(&mut tape);
        let z = tape.constant(Tensor::row(vec![0.3, -0.4]));
        let tags = net.hard_tags(&mut tape, &[&[2]]).unwrap();
        let tag = tape.value(tags[0]).data().to_vec();
        let (cx, h0) = net.decoder_context(&mut tape, z, tags).unwrap();
        let (ctx, w) = net.tag_attention(&mut tape, h0, &cx).unwrap();
        assert_eq!(tape.value(w).data(), &[1.0]);
        assert_eq!(tape.value(ctx).data(), tag.as_slice());

        // Identical tag vectors: uniform weights.
        let three = ModelParams::new(config, 6, &[2, 2, 2], 1).unwrap();
        let mut tape = Tape::new();
        let net = three.bind(&mut tape);
        let z = tape.constant(Tensor::row(vec![0.3, -0.4]));
        let same = tape.constant(Tensor::row(vec![0.1, 0.2, 0.3, 0.4]));
        let (cx, h0) = net.decoder_context(&mut tape, z, vec![same, same, same]).unwrap();
        let (_, w) = net.tag_attention(&mut tape, h0, &cx).unwrap();
        for v in tape.value(w).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn step_distribution_is_normalized() {
        let p = tiny();
        let mut tape = Tape::new();
        let net = p.bind(&mut tape);
        let z = tape.constant(Tensor::matrix(2, 3, vec![0.1, 0.2, -0.3, 1.0, 0.0, 0.5]));
        let tags = net.hard_tags(&mut tape, &[&[0, 2], &[1, 1]]).unwrap();
        let (cx, h0) = net.decoder_context(&mut tape, z, tags).unwrap();
        let prev = net.embed(&mut tape, &[BOS, BOS]).unwrap();
        let out = net.decode_step(&mut tape, prev, h0, &cx).unwrap();
        let probs = tape.softmax(out.logits, 1.0).unwrap();
        for row in tape.value(probs).data().chunks(8) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        for row in tape.value(out.attention).data().chunks(2) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn embedding_gradient_touches_only_used_rows() {
        let p = tiny();
        let mut tape = Tape::new();
        let net = p.bind(&mut tape);
        let enc = net.encode(&mut tape, &[&[4, 6]]).unwrap();
        let s = tape.sum_all(enc.summary).unwrap();
        let g = tape.backward(s).unwrap();
        let grads = net.collect_grads(&g);
        let emb = &grads[p.layout().char_emb];
        for (row, chunk) in emb.chunks(5).enumerate() {
            let used = row == 4 || row == 6 || row == PAD;
            assert_eq!(chunk.iter().any(|&v| v != 0.0), used && row != PAD, "row {row}");
        }
    }

    #[test]
    fn from_named_checks_shapes() {
        let p = tiny();
        let named: Vec<_> = p.names().iter().cloned().zip(p.tensors().iter().cloned()).collect();
        let q = ModelParams::from_named(*p.config(), 8, &[2, 3], named.clone()).unwrap();
        assert_eq!(p, q);
        assert!(ModelParams::from_named(*p.config(), 8, &[2, 4], named).is_err());
    }
}
