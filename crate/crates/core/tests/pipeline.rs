mod common;

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use paramgen::baselines;
use paramgen::data::{ToyUniverse, ToyUniverseConfig};
use paramgen::eval::{self, run_experiment, Experiment, ExperimentConfig, Method, Suite};
use paramgen::pmodel::{self, SgdConfig};
use paramgen::universe::{self, PromptMode, SamplingStrategy, TaskSpec};
use paramgen::Error;
use proptest::prelude::*;

fn read_reports(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    files.sort();
    files
        .into_iter()
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect()
}

#[test]
fn every_suite_runs_and_reruns_byte_identically() {
    let cfg = common::tiny_experiment();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = run_experiment(&cfg, a.path()).unwrap();
    let rb = run_experiment(&cfg, b.path()).unwrap();
    assert_eq!(ra, rb);

    let hash = cfg.hash();
    let da = a.path().join(&hash).join("reports");
    let fa = read_reports(&da);
    assert_eq!(fa, read_reports(&b.path().join(&hash).join("reports")));
    // Seven suites, three files each, plus the distance table.
    assert_eq!(fa.len(), 7 * 3 + 1);

    // Cached artifacts reproduce the same bytes.
    let again = run_experiment(&cfg, a.path()).unwrap();
    assert_eq!(again, ra);
    assert_eq!(read_reports(&da), fa);

    for r in &ra {
        assert_eq!(r.config_hash, hash);
        if r.applicable {
            assert_eq!(r.num_tasks, r.accuracies.len());
            assert!(r.accuracies.iter().all(|a| (0.0..=1.0).contains(a)));
        }
    }
    let taper_full = ra
        .iter()
        .find(|r| r.suite == "unseen" && r.method == "taper" && r.variant == "unseen=100%")
        .unwrap();
    assert!(!taper_full.applicable);
    let taper_mixed = eval::find(&ra, "taper", "unseen=40%").unwrap();
    assert!(taper_mixed.applicable);
    let csv = fs::read_to_string(da.join("memorization_distances.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 * 2);
}

#[test]
fn image_prompts_need_an_image_tower() {
    let mut cfg = common::tiny_experiment();
    cfg.encoder.kind = paramgen::encoder::EncoderKind::DeterministicStub;
    cfg.eval.cross_train_modes = vec![PromptMode::Name];
    cfg.eval.cross_modes = vec![PromptMode::Image];
    let dir = tempfile::tempdir().unwrap();
    let mut exp = Experiment::open(cfg, dir.path()).unwrap();
    let reports = exp.run_suite(Suite::PromptCross).unwrap();
    assert_eq!(reports.len(), 1);
    assert!(!reports[0].applicable);
}

#[test]
fn single_method_runs_leave_the_hash_alone() {
    let cfg = common::tiny_experiment();
    let dir = tempfile::tempdir().unwrap();
    let mut exp = Experiment::open(cfg.clone(), dir.path()).unwrap();
    let only = exp.run_suite_with(Suite::Ood, &[Method::Select]).unwrap();
    assert_eq!(only.len(), 1);
    assert_eq!(only[0].method, "select");
    assert_eq!(exp.hash, cfg.hash());
    assert!(exp.variant("cross_image").is_ok());
    assert!(exp.variant("sideways").is_err());
}

#[test]
fn config_names_and_aliases() {
    let cfg = ExperimentConfig::from_toml("[eval]\nmethods = [\"tina\", \"select\"]\nsuites = [\"class_count\"]\n").unwrap();
    assert_eq!(cfg.eval.methods, vec![Method::Diffusion, Method::Select]);
    match ExperimentConfig::from_toml("[tasks]\nclasses = 9\n[dit]\nc_max = 5\n") {
        Err(Error::Config { path, .. }) => assert_eq!(path, "dit.c_max"),
        other => panic!("unexpected {other:?}"),
    }
    match ExperimentConfig::from_toml("[universe]\nnum_classes = \"many\"\n") {
        Err(Error::Config { path, .. }) => assert_eq!(path, "universe.num_classes"),
        other => panic!("unexpected {other:?}"),
    }
}

fn universe() -> ToyUniverse {
    ToyUniverse::generate(
        &ToyUniverseConfig {
            train_per_class: 30,
            test_per_class: 10,
            ..ToyUniverseConfig::default()
        },
        1,
    )
    .unwrap()
}

#[test]
fn selection_reuses_generic_rows_in_task_order() {
    let u = universe();
    let arch = paramgen::arch::ArchSpec::toy_mlp([1, 8, 8], 8, 12);
    let g = pmodel::train_generic(&u.train, &arch, &SgdConfig::default().with_epochs(1), 0).unwrap();
    let task = TaskSpec::new("t", vec![7, 2, 9], PromptMode::Name).unwrap();
    let (a, p) = baselines::classifier_select(&g, &task).unwrap();
    let w = a.classifier_weight();
    let row = g.arch.hidden;
    for (i, &c) in task.class_ids.iter().enumerate() {
        assert_eq!(&p.tensors[w][i * row..(i + 1) * row], &g.params.tensors[w][c * row..(c + 1) * row]);
    }
    let zeroed = baselines::classifier_select_zeroed(&g, &task).unwrap();
    assert!(zeroed.tensors[w][0..row].iter().all(|&v| v == 0.0));
    assert_eq!(&zeroed.tensors[w][7 * row..8 * row], &g.params.tensors[w][7 * row..8 * row]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn sampled_tasks_are_well_formed(seed in any::<u64>(), c in 1usize..=12, count in 1usize..60) {
        let u = universe();
        let tasks = universe::sample_tasks(&u.vocab, count, c, SamplingStrategy::Uniform, seed).unwrap();
        prop_assert_eq!(tasks.len(), count);
        for t in &tasks {
            prop_assert_eq!(t.num_classes(), c);
            prop_assert_eq!(t.class_set().len(), c);
            prop_assert!(t.class_ids.iter().all(|&k| k < 12));
        }
    }

    #[test]
    fn ood_tasks_avoid_training_combinations(seed in any::<u64>()) {
        let u = universe();
        let tasks = universe::sample_tasks(&u.vocab, 100, 5, SamplingStrategy::Uniform, seed).unwrap();
        let split = universe::build_splits(&u.vocab, tasks, 40, seed).unwrap();
        let train: HashSet<Vec<usize>> = split.train_tasks.iter().map(TaskSpec::class_set).collect();
        let mut ood = HashSet::new();
        for t in &split.ood_test_tasks {
            prop_assert!(!train.contains(&t.class_set()));
            prop_assert!(ood.insert(t.class_set()));
        }
    }

    #[test]
    fn unseen_fractions_are_exact(seed in any::<u64>(), k in 0usize..=5) {
        let seen: Vec<usize> = (0..12).collect();
        let unseen: Vec<usize> = (12..24).collect();
        let f = k as f64 / 5.0;
        let tasks = universe::tasks_with_unseen_fraction(&seen, &unseen, 5, f, 20, &HashSet::new(), seed).unwrap();
        for t in &tasks {
            prop_assert_eq!(t.class_ids.iter().filter(|&&x| x >= 12).count(), k);
            prop_assert_eq!(t.class_set().len(), 5);
        }
    }
}
