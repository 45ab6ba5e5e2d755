//! Deterministic random streams.
//!
//! Every random draw in training is taken from a stream that is a pure
//! function of the run seed, a purpose, and a counter (epoch or step), so a
//! resumed run replays exactly the draws an uninterrupted run would make.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    Init,
    LabeledShuffle,
    UnlabeledShuffle,
    StepNoise,
}

impl Purpose {
    fn salt(self) -> u64 {
        match self {
            Purpose::Init => 0x1f83_d9ab_fb41_bd6b,
            Purpose::LabeledShuffle => 0x5be0_cd19_137e_2179,
            Purpose::UnlabeledShuffle => 0x9b05_688c_2b3e_6c1f,
            Purpose::StepNoise => 0x510e_527f_ade6_82d1,
        }
    }
}

pub fn stream(seed: u64, purpose: Purpose, counter: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ purpose.salt());
    rng.set_stream(counter);
    rng
}
