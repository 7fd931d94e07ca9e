use super::*;
use crate::sim::DgpSpec;

pub(crate) fn smoke_config() -> RunConfig {
    RunConfig::from_toml(
        r#"
seed = 11

[[models]]
arch = "OLS"

[[models]]
arch = "MLP"
hyper = { hidden = [8, 4] }

[train]
max_epochs = 5
batch_size = 128

[simulate]
n_assets = 50
n_months = 60
"#,
    )
    .unwrap()
}

#[test]
fn config_parsing() {
    let cfg = smoke_config();
    assert_eq!(cfg.models.len(), 2);
    assert_eq!(cfg.models[1].hyper.hidden, vec![8, 4]);
    assert_eq!(cfg.simulate.as_ref().unwrap().n_assets, 50);
    assert_eq!(cfg.simulate.as_ref().unwrap().noise_scale, DgpSpec::default().noise_scale);
    for bad in [
        "sed = 1",
        "[train]\nlearning_rte = 0.1",
        "[[models]]\narch = \"Perceptron\"",
        "[[models]]\narch = \"MLP\"\nhyper = { widths = [3] }",
        "[split]\nkind = \"fractions\"\ntrain = 0.5\nvalidation = 0.1\ntest = 0.1",
        "[[models]]\narch = \"OLS\"\n[[models]]\narch = \"OLS\"",
        "[train]\ndropout = 1.5",
    ] {
        let r = RunConfig::from_toml(bad).and_then(|c| c.split.apply(&[crate::data::Month::new(2000, 1).unwrap(); 10]).map(|_| c));
        assert!(matches!(r, Err(Error::Config(_))), "{bad}: {r:?}");
    }
    let dates = RunConfig::from_toml("[split]\nkind = \"dates\"\nvalidation_start = \"2008-01\"\ntest_start = \"2013-01\"").unwrap();
    assert_eq!(dates.split, crate::data::SplitSpec::long_span());
}

#[test]
fn relative_paths_follow_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    fs::write(&path, "[paths]\npanel = \"data/p.csv\"\nout = \"/abs/out\"\n").unwrap();
    let cfg = RunConfig::load(&path).unwrap();
    assert_eq!(cfg.paths.panel.unwrap(), dir.path().join("data/p.csv"));
    assert_eq!(cfg.paths.out.unwrap(), PathBuf::from("/abs/out"));
    assert!(matches!(RunConfig::load(&dir.path().join("missing.toml")), Err(Error::Config(_))));
}

#[test]
fn exit_codes() {
    assert_eq!(exit_code(&Error::Config("x".into())), 2);
    assert_eq!(exit_code(&Error::Data("x".into())), 3);
    assert_eq!(exit_code(&Error::Divergence { epoch: 1, batch: 1, detail: String::new() }), 4);
    assert_eq!(exit_code(&Error::NonFinite { op: "add" }), 4);
    let wrapped = Error::Study { model: "m".into(), rep: 0, source: Box::new(Error::Config("x".into())) };
    assert_eq!(exit_code(&wrapped), 2);
    assert_eq!(exit_code(&Error::Io(std::io::Error::other("x"))), 1);
}

#[test]
fn manifest_detects_tampering() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("a.csv"), "1,2\n").unwrap();
    let m = RunManifest::write(dir.path(), "evaluate", "h", vec![], vec!["a.csv".into()], 0.0).unwrap();
    assert_eq!(RunManifest::read(dir.path()).unwrap(), m);
    m.verify(dir.path()).unwrap();
    fs::write(dir.path().join("a.csv"), "1,3\n").unwrap();
    let err = m.verify(dir.path()).unwrap_err();
    assert!(matches!(err, Error::Data(_)) && err.to_string().contains("a.csv"));
    assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

fn run_all(p: &Pipeline) -> Vec<StageOutput> {
    vec![p.simulate().unwrap(), p.train().unwrap(), p.predict().unwrap(), p.evaluate().unwrap(), p.backtest().unwrap(), p.report().unwrap()]
}

#[test]
fn full_pipeline_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(smoke_config(), dir.path().to_path_buf()).unwrap();
    assert!(matches!(p.train(), Err(Error::Data(_))), "train before simulate");
    let outs = run_all(&p);
    let pred = &outs[2].manifest;
    for f in ["OLS.is.csv", "OLS.oos.csv", "MLP.oos.csv", "Oracle.oos.csv"] {
        assert!(pred.digest_of(f).is_some(), "{f}");
    }
    let eval = &outs[3];
    let r2 = fs::read_to_string(eval.dir.join("r2.csv")).unwrap();
    let models: Vec<&str> = r2.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(models, vec!["OLS", "MLP", "Oracle"]);
    let report = fs::read_to_string(outs[5].dir.join("report.md")).unwrap();
    for section in ["## Predictive R²", "## Pairwise forecast comparison", "## Decile portfolios", "### OLS", "### MLP", "## Cumulative log returns"] {
        assert!(report.contains(section), "{section}");
    }

    // Reruns go to new directories and reproduce the same bytes.
    let again = p.evaluate().unwrap();
    assert!(again.dir.ends_with("evaluate/rerun-001"));
    assert_eq!(again.manifest.files, eval.manifest.files);
    let rep2 = p.report().unwrap();
    assert!(rep2.dir.ends_with("report/rerun-001"));
    assert_eq!(rep2.manifest.files, outs[5].manifest.files);

    // Tampering with a forecast file is caught downstream.
    let oos = outs[2].dir.join("MLP.oos.csv");
    let mut text = fs::read_to_string(&oos).unwrap();
    text.push_str("2099-01,zzz,0,0\n");
    fs::write(&oos, text).unwrap();
    assert!(matches!(p.evaluate(), Err(Error::Data(_))));
}

#[test]
fn downstream_stages_refuse_a_different_config() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(smoke_config(), dir.path().to_path_buf()).unwrap();
    p.simulate().unwrap();
    p.train().unwrap();
    let mut other = smoke_config();
    other.train.max_epochs = 6;
    let q = Pipeline::new(other, dir.path().to_path_buf()).unwrap();
    assert!(matches!(q.predict(), Err(Error::Config(_))));
    // the output location is not part of the configuration digest
    let mut moved = smoke_config();
    moved.paths.out = Some(PathBuf::from("elsewhere"));
    assert_eq!(Pipeline::new(moved, dir.path().to_path_buf()).unwrap().config_hash(), p.config_hash());
}

#[test]
fn report_needs_a_complete_run() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(smoke_config(), dir.path().to_path_buf()).unwrap();
    assert!(matches!(p.report(), Err(Error::Data(_))));
}

#[test]
fn grad_check_stage_writes_table() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(RunConfig::default(), dir.path().to_path_buf()).unwrap();
    let out = p.grad_check(1, 1e-4).unwrap();
    let text = fs::read_to_string(out.dir.join("gradcheck.csv")).unwrap();
    assert_eq!(text.lines().count(), 1 + Arch::ALL.len());
    assert!(matches!(p.grad_check(1, 0.0), Err(Error::GradientMismatch(_))));
}
