//! Deck generation, execution, decryption and the data store, stage by stage.

mod common;

use std::fs;
use std::path::{Path, PathBuf};

use mcforge::deck::{self, CyclePlan};
use mcforge::postproc::{self, DecryptOptions, EntryKind, FlukaData, PostprocError, UtilityBackend, UtilityTable};
use mcforge::runner::{self, Engine, RunConfig, RunStatus, RunnerError, ScoringCard};
use mcforge::stats;

fn decks(dir: &Path) -> Vec<PathBuf> {
    let (template, params) = common::write_inputs(dir);
    let template = deck::InputDeck::read(&template).unwrap();
    let params = deck::load_parameters(&params).unwrap();
    let plan = CyclePlan {
        prefix: "example".into(),
        count: common::CYCLES,
        base_seed: 1001,
        output_dir: dir.join("decks"),
    };
    deck::generate_cycles(&template, &params, &plan).unwrap()
}

fn mock_run(dir: &Path) -> (Vec<PathBuf>, PathBuf) {
    let inputs = decks(dir);
    let exec = dir.join("exec");
    let cfg = RunConfig::mock(&exec, common::tuned_spec(12.5));
    let jobs = runner::emit_job_scripts(&inputs, &cfg).unwrap();
    let summary = runner::execute_all(&jobs, &cfg).unwrap();
    assert!(summary.succeeded());
    (inputs, exec)
}

#[test]
fn scoring_units_follow_the_cards() {
    let d = deck::parse_deck(common::TEMPLATE);
    let units: Vec<(u8, ScoringCard)> = runner::scoring_units(&d).iter().map(|u| (u.unit, u.card)).collect();
    assert_eq!(units, [(46, ScoringCard::Usrbdx), (17, ScoringCard::Detect)]);
}

#[test]
fn mock_runs_write_one_binary_per_unit_and_cycle() {
    let dir = tempfile::tempdir().unwrap();
    let (_, exec) = mock_run(dir.path());
    let groups = postproc::binary_files(&exec).unwrap();
    assert_eq!(groups.keys().copied().collect::<Vec<_>>(), [17, 46]);
    assert_eq!(groups[&46].len(), common::CYCLES);
    assert_eq!(groups[&46][0], "example_01001_fort.46");
    for i in 1..=common::CYCLES {
        assert!(exec.join(format!("AutoFLUKA_job{i}.sh")).is_file());
    }
}

#[test]
fn same_seed_gives_identical_binaries() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (_, ea) = mock_run(a.path());
    let (_, eb) = mock_run(b.path());
    let name = "example_03001_fort.46";
    assert_eq!(fs::read(ea.join(name)).unwrap(), fs::read(eb.join(name)).unwrap());
    assert_ne!(
        fs::read(ea.join("example_01001_fort.46")).unwrap(),
        fs::read(ea.join("example_02001_fort.46")).unwrap()
    );
}

#[test]
fn decryption_and_store_with_mock_utilities() {
    let dir = tempfile::tempdir().unwrap();
    let (_, exec) = mock_run(dir.path());
    let opts = DecryptOptions {
        backend: UtilityBackend::Mock,
        ..DecryptOptions::default()
    };
    let listings = postproc::decrypt_all(&exec, &UtilityTable::default(), common::CYCLES, &opts).unwrap();
    assert_eq!(listings.len(), 4);
    let log = fs::read_to_string(exec.join(postproc::DECRYPTION_LOG)).unwrap();
    // Unit 17 is tried with the DETECT utility first.
    assert!(log.contains("unit 17 | utility detsuw"));
    assert!(log.contains("unit 46 | utility usxsuw"));

    let build = postproc::build_store(&listings, &exec.join(postproc::STORE_FILE)).unwrap();
    assert!(build.warnings.is_empty(), "{:?}", build.warnings);
    let data = FlukaData::load(&exec.join(postproc::STORE_FILE)).unwrap();
    assert_eq!(data, build.data);

    let tab = data.get(&FlukaData::tab_key("output", 46)).unwrap();
    assert_eq!(tab.kind, EntryKind::Tab);
    let oracle = {
        let rows = tab.rows();
        rows.iter().map(|r| r.value * r.err_pct).sum::<f64>() / rows.iter().map(|r| r.value).sum::<f64>()
    };
    let u = tab.average_uncertainty.unwrap();
    assert!((u - oracle).abs() < 1e-9 * oracle);
    // Tuned to 12.5 % before noise.
    assert!((u - 12.5).abs() < 1.5, "{u}");

    let sum = data.get(&FlukaData::sum_key("output", 46)).unwrap();
    assert_eq!(sum.total_primaries, Some(common::NPS_PER_CYCLE * common::CYCLES as u64));
    let est = stats::required_nps(u, 10.0, common::NPS_PER_CYCLE, stats::DEFAULT_GRANULARITY).unwrap();
    assert_eq!(est.required_nps % 100_000, 0);
    assert!(est.required_nps >= common::NPS_PER_CYCLE);
}

#[test]
fn failing_utilities_are_logged_and_reported() {
    let dir = tempfile::tempdir().unwrap();
    let (_, exec) = mock_run(dir.path());
    let mut table = UtilityTable::default();
    for name in ["usxsuw", "ustsuw", "usbsuw", "detsuw", "usrsuw", "usysuw"] {
        assert!(table.set_command(name, "false"));
    }
    let err = postproc::decrypt_all(&exec, &table, common::CYCLES, &DecryptOptions::default()).unwrap_err();
    match err {
        PostprocError::AllUtilitiesFailed { unit, failures } => {
            assert_eq!(unit, 17);
            assert_eq!(failures.len(), 6);
        }
        other => panic!("unexpected {other}"),
    }
    let log = fs::read_to_string(exec.join(postproc::DECRYPTION_LOG)).unwrap();
    assert_eq!(log.matches("===== end =====").count(), 6);
    assert!(log.contains("failure"));
}

#[test]
fn external_engine_runs_job_scripts() {
    let dir = tempfile::tempdir().unwrap();
    let inputs = decks(dir.path());
    let exec = dir.path().join("exec");
    let cfg = RunConfig {
        executable: "cp {input} {stem}.copy".into(),
        execution_dir: exec.clone(),
        job_script_prefix: "job".into(),
        max_parallel: 2,
        engine: Engine::External,
    };
    let jobs = runner::emit_job_scripts(&inputs, &cfg).unwrap();
    let summary = runner::execute_all(&jobs, &cfg).unwrap();
    assert!(summary.succeeded());
    assert_eq!(summary.records.len(), inputs.len());
    for input in &inputs {
        let stem = input.file_stem().unwrap().to_str().unwrap();
        assert_eq!(fs::read(exec.join(format!("{stem}.copy"))).unwrap(), fs::read(input).unwrap());
    }
    assert!(summary.wall_time_text().starts_with("00:00:"));

    let failing = RunConfig {
        executable: "false".into(),
        ..cfg.clone()
    };
    let jobs = runner::emit_job_scripts(&inputs[..2], &failing).unwrap();
    let summary = runner::execute_all(&jobs, &failing).unwrap();
    assert!(summary.records.iter().all(|r| r.status == RunStatus::Failed));

    let missing = RunConfig {
        executable: "no-such-engine-binary-xyz".into(),
        ..cfg
    };
    assert!(matches!(runner::execute_all(&jobs, &missing), Err(RunnerError::Spawn { .. })));
}

#[test]
fn zero_parallelism_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::mock(dir.path(), Default::default());
    cfg.max_parallel = 0;
    assert!(matches!(runner::execute_all(&[], &cfg), Err(RunnerError::InvalidParallelism)));
}

#[test]
fn stats_reject_degenerate_input() {
    assert_eq!(stats::average_uncertainty(&[]), Err(stats::StatsError::ZeroWeight));
    assert!(stats::required_nps(12.5, 0.0, 1, 1).is_err());
    assert!(stats::required_nps(12.5, 10.0, 0, 1).is_err());
    assert!(stats::required_nps(12.5, 10.0, 1, 0).is_err());
    assert_eq!(stats::average_energy(&[(0.0, 1.0, 0.0)]), Err(stats::StatsError::ZeroCounts));
    // Already below target: fewer primaries, still a whole number of steps.
    let est = stats::required_nps(5.0, 10.0, 1_000_000, 100_000).unwrap();
    assert_eq!(est.required_nps, 300_000);
}
