//! Reading the sample corpus from disk.

use std::path::PathBuf;

use msved::corpus::{build_schema_and_vocab, load_unlabeled, parse_task3, task_words, NUM_SPECIALS};

fn fixture() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/samples.tsv")
}

#[test]
fn multibyte_characters_are_single_symbols() {
    let examples = parse_task3(fixture()).unwrap();
    assert_eq!(examples.len(), 9);
    let (schema, vocab) = build_schema_and_vocab(&examples, &task_words(&examples)).unwrap();
    for ch in ['ż', 'ä'] {
        assert!(vocab.symbols().contains(&ch), "{ch}");
    }
    for ex in &examples {
        for word in [&ex.source, &ex.target] {
            let ids = vocab.encode(word);
            assert_eq!(ids.len(), word.chars().count());
            assert!(ids.iter().all(|&i| i >= NUM_SPECIALS));
            assert_eq!(&vocab.decode(&ids), word);
        }
        let v = schema.label_vector(&ex.labels).unwrap();
        assert_eq!(v.len(), schema.num_categories());
    }
    let again = build_schema_and_vocab(&examples, &task_words(&examples)).unwrap();
    assert_eq!(again.0.hash(), schema.hash());
    assert_eq!(again.1, vocab);
}

#[test]
fn unlabeled_files_are_normalized_and_limited() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("words.txt");
    std::fs::write(&path, "ka\u{308}si\n\nkäsi\n  talo \nmeri\n").unwrap();
    let words = load_unlabeled(&path, 10).unwrap();
    let forms: Vec<&str> = words.iter().map(|w| w.form.as_str()).collect();
    assert_eq!(forms, ["käsi", "talo", "meri"]);
    assert_eq!(load_unlabeled(&path, 2).unwrap().len(), 2);
    assert!(load_unlabeled(dir.path().join("missing.txt"), 10).is_err());
}
