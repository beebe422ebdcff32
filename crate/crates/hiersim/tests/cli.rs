use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;

use hiersim::config::{parse_config, ExperimentConfig, ExperimentKind};
use hiersim::output::{sha256_hex, MANIFEST};
use hiersim::run::{run, RunOptions};
use hiersim::{RunManifest, RunStatus};
use hiersim_core::renorm::classify_dichotomy;
use proptest::prelude::*;

fn run_into(config: &ExperimentConfig, dir: &Path, jobs: usize) -> RunManifest {
    run(
        config,
        &RunOptions {
            out_dir: dir.to_path_buf(),
            jobs,
        },
    )
    .unwrap()
    .manifest
}

fn read_dir(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().into_string().unwrap(),
                fs::read(e.path()).unwrap(),
            )
        })
        .filter(|(name, _)| name != MANIFEST)
        .collect()
}

fn manifest_on_disk(dir: &Path) -> RunManifest {
    serde_json::from_slice(&fs::read(dir.join(MANIFEST)).unwrap()).unwrap()
}

#[test]
fn manifest_lists_every_file_with_its_hash() {
    for kind in ExperimentKind::ALL {
        let tmp = tempfile::tempdir().unwrap();
        let m = run_into(&ExperimentConfig::example(kind), tmp.path(), 2);
        assert_eq!(m, manifest_on_disk(tmp.path()));
        let files = read_dir(tmp.path());
        assert_eq!(files.len(), m.files.len(), "{kind}");
        for f in &m.files {
            let bytes = &files[&f.path];
            assert_eq!(f.sha256, sha256_hex(bytes), "{kind} {}", f.path);
            assert_eq!(f.bytes, bytes.len() as u64);
        }
        assert_eq!(m.status, RunStatus::Complete);
        assert_eq!(m.config_hash, ExperimentConfig::example(kind).hash());
    }
}

#[test]
fn zero_replicas_give_empty_results_and_a_manifest() {
    for kind in [
        ExperimentKind::DiffusionRun,
        ExperimentKind::CanningsRun,
        ExperimentKind::MckeanVlasov,
        ExperimentKind::InteractionChain,
        ExperimentKind::Fss,
        ExperimentKind::GenealogyStats,
    ] {
        let mut c = ExperimentConfig::example(kind);
        c.replicas = 0;
        let tmp = tempfile::tempdir().unwrap();
        let m = run_into(&c, tmp.path(), 1);
        assert_eq!(m.replicas_completed, 0);
        assert_eq!(m.status, RunStatus::Complete);
        assert!(!m.files.is_empty());
        for (name, bytes) in read_dir(tmp.path()) {
            if name.ends_with(".csv") && name != "moments.csv" {
                let text = String::from_utf8(bytes).unwrap();
                assert_eq!(text.lines().count(), 1, "{kind} {name}: header only");
            }
        }
    }
}

#[test]
fn dichotomy_output_matches_direct_classification() {
    let text = r#"
kind = "dichotomy"
[renorm]
d0 = 0.5
horizon = 150
[[renorm.cases]]
c = { type = "values", values = [1.0, 2.0, 4.0, 8.0, 16.0, 32.0] }
[renorm.grid]
c_ratios = [0.5, 1.0, 1.5, 3.0]
lambda_scales = [0.0, 2.0]
lambda_ratios = [1.0, 2.0, 4.0]
"#;
    let config = parse_config(text).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    run_into(&config, tmp.path(), 3);
    let out: Vec<serde_json::Value> =
        serde_json::from_slice(&fs::read(tmp.path().join("dichotomy.json")).unwrap()).unwrap();
    let renorm = config.renorm.as_ref().unwrap();
    let cases = renorm.all_cases();
    assert_eq!(out.len(), 1 + 4 * 2 * 3);
    assert_eq!(out.len(), cases.len());
    for (entry, case) in out.iter().zip(&cases) {
        let direct = classify_dichotomy(&renorm.params(case), renorm.horizon).unwrap();
        assert_eq!(entry["verdict"], serde_json::to_value(&direct).unwrap());
    }
}

#[test]
fn outputs_do_not_depend_on_thread_count() {
    for kind in [
        ExperimentKind::DiffusionRun,
        ExperimentKind::GenealogyStats,
        ExperimentKind::Fss,
    ] {
        let mut c = ExperimentConfig::example(kind);
        c.replicas = 6;
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        run_into(&c, a.path(), 1);
        run_into(&c, b.path(), 8);
        assert_eq!(read_dir(a.path()), read_dir(b.path()), "{kind}");
        c.seed += 1;
        let d = tempfile::tempdir().unwrap();
        run_into(&c, d.path(), 4);
        assert_ne!(read_dir(a.path()), read_dir(d.path()), "{kind}");
    }
}

#[test]
fn budget_cuts_a_replica_prefix() {
    let mut c = ExperimentConfig::example(ExperimentKind::InteractionChain);
    c.chain.as_mut().unwrap().engine = hiersim::config::ChainEngineConfig::Simulated {
        burn_in: 6.0,
        dt: 0.01,
        cutoff: 1e-3,
    };
    c.replicas = 5;
    let full = tempfile::tempdir().unwrap();
    run_into(&c, full.path(), 2);
    c.budget.max_site_steps = Some(2.5 * 2.0 * 600.0);
    let part = tempfile::tempdir().unwrap();
    let outcome = run(
        &c,
        &RunOptions {
            out_dir: part.path().to_path_buf(),
            jobs: 2,
        },
    )
    .unwrap();
    assert_eq!(outcome.exit_code(), 3);
    assert_eq!(outcome.manifest.status, RunStatus::BudgetExceeded);
    assert_eq!(outcome.manifest.replicas_completed, 2);
    let full_rows = String::from_utf8(read_dir(full.path())["samples.csv"].clone()).unwrap();
    let part_rows = String::from_utf8(read_dir(part.path())["samples.csv"].clone()).unwrap();
    assert!(full_rows.starts_with(&part_rows));
    assert_eq!(part_rows.lines().count(), 1 + 2 * 3);
}

#[test]
fn constraint_violation_is_cited() {
    let text = "kind = \"seedbank-tail\"\n[seedbank.model]\ntype = \"power-law\"\na = 1.0\nb = 1.0\nalpha = 0.9\n\
                beta = 0.05\nm_max = 100\n";
    let err = parse_config(text).unwrap_err();
    assert_eq!(err.0.len(), 1);
    assert!(err.0[0].contains("α + β > 1"), "{err}");
    let ok = text.replace("beta = 0.05", "beta = 0.2");
    parse_config(&ok).unwrap();
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hiersim"))
}

#[test]
fn cli_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "kind = \"fss\"\nreplicas = 2\ntypo = 1\n").unwrap();
    let out = bin()
        .args(["validate", bad.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("`typo`") && stderr.contains("[fss]"),
        "{stderr}"
    );

    let good = tmp.path().join("good.toml");
    let mut c = ExperimentConfig::example(ExperimentKind::MckeanVlasov);
    c.replicas = 3;
    fs::write(&good, c.canonical_toml()).unwrap();
    let out = bin()
        .args(["validate", good.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains(&c.hash()));

    let dir = tmp.path().join("run");
    let out = bin()
        .args([
            "run",
            good.to_str().unwrap(),
            "--seed",
            "9",
            "--replicas",
            "2",
            "--jobs",
            "2",
            "--out-dir",
        ])
        .arg(&dir)
        .output()
        .unwrap();
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let m = manifest_on_disk(&dir);
    assert_eq!((m.seed, m.replicas_requested, m.jobs), (9, 2, 2));

    let mut capped = c.clone();
    capped.budget.max_site_steps = Some(3_000.0);
    fs::write(&good, capped.canonical_toml()).unwrap();
    let out = bin()
        .args(["run", good.to_str().unwrap(), "--out-dir"])
        .arg(tmp.path().join("capped"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(
        manifest_on_disk(&tmp.path().join("capped")).replicas_completed,
        1
    );

    let out = bin().args(["describe", "seedbank-tail"]).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    let example = text
        .split("# example with defaults filled in\n")
        .nth(1)
        .unwrap();
    assert_eq!(
        parse_config(example).unwrap(),
        ExperimentConfig::example(ExperimentKind::SeedbankTail)
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn canonical_form_round_trips(
        seed in 0u64..(1 << 62),
        replicas in 0usize..1000,
        c in 0.01f64..100.0,
        d in 0.0f64..100.0,
        theta in 0.0f64..=1.0,
        dt in 1e-4f64..0.5,
        ladder in proptest::collection::vec(1u32..500, 1..5),
    ) {
        let mut config = ExperimentConfig::example(ExperimentKind::Fss);
        config.seed = seed;
        config.replicas = replicas;
        let f = config.fss.as_mut().unwrap();
        f.c = c;
        f.d = d;
        f.theta0 = theta;
        f.dt = dt;
        f.ladder = ladder;
        let text = config.canonical_toml();
        let again = parse_config(&text).unwrap();
        prop_assert_eq!(&again, &config);
        prop_assert_eq!(again.hash(), config.hash());
        prop_assert_eq!(again.canonical_toml(), text);
    }
}
