use std::path::PathBuf;

use vgp::config::{locate, RunConfig};

fn repo() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn read(rel: &str) -> String {
    std::fs::read_to_string(repo().join(rel)).unwrap()
}

#[test]
fn reference_document_lists_the_defaults() {
    let parsed = RunConfig::parse(&read("docs/config.toml"), "docs/config.toml").unwrap();
    assert_eq!(parsed, RunConfig::default());
}

#[test]
fn shipped_configs_parse_and_round_trip() {
    let mut seen = 0;
    for entry in std::fs::read_dir(repo().join("configs")).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let text = std::fs::read_to_string(&path).unwrap();
            let cfg = RunConfig::parse(&text, &path.display().to_string())
                .unwrap_or_else(|e| panic!("{e}"));
            let again = RunConfig::parse(&cfg.to_toml(), "round-trip").unwrap();
            assert_eq!(cfg, again, "{}", path.display());
            seen += 1;
        }
    }
    assert!(seen >= 9);
}

#[test]
fn diagnostics_point_at_the_offending_line() {
    let src = "seed = 1\n\n[model]\nanchors = 5\njitter_rel = 0.5\n";
    let err = RunConfig::parse(src, "bad.toml").unwrap_err();
    assert_eq!(err.line, Some(5));
    assert_eq!(err.key, "model.jitter_rel");
    assert!(err.to_string().starts_with("bad.toml:5: model.jitter_rel: "));

    let err = RunConfig::parse("[train]\niterations = 10\nbogus = 1\n", "bad.toml").unwrap_err();
    assert_eq!(err.line, Some(3));
    assert!(err.message.contains("bogus"));

    let err = RunConfig::parse("[target]\nname = \"nope\"\n", "x").unwrap_err();
    assert_eq!(err.line, Some(2));
    assert!(err.message.contains("conjugate_gaussian"));

    let err = RunConfig::parse("[model]\nfamily = \"delta\"\nanchors = 0\n", "x").unwrap_err();
    assert_eq!(err.key, "model.family");
}

#[test]
fn family_must_suit_the_target() {
    let src = "[target]\nname = \"bernoulli\"\ndim = 1\ntable = [0.0, 1.0]\n";
    let err = RunConfig::parse(src, "x").unwrap_err();
    assert_eq!(err.key, "model.family");
    let ok = format!("{src}[model]\nfamily = \"bernoulli\"\n");
    assert!(RunConfig::parse(&ok, "x").is_ok());
}

#[test]
fn locate_falls_back_to_section_header() {
    let src = "[a]\nx = 1\n[b]\ny = 2\n";
    assert_eq!(locate(src, "b.y"), Some(4));
    assert_eq!(locate(src, "b.z"), Some(3));
    assert_eq!(locate(src, "c.z"), None);
}
