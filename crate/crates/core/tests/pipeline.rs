//! Stage wiring, freezing and reproducibility of the training pipeline.

use esol::cam::{clip_features, multiscale_cam};
use esol::config::TrainConfig;
use esol::data::{generate, Dataset};
use esol::model::{Ablation, Entry, Model, Stage};
use esol::train::{run_ablation_grid, run_pipeline, train_baseline, train_expansion, AblationAxis};
use esol::{Graph, Tensor};

fn tiny() -> (Dataset, TrainConfig) {
    let cfg = TrainConfig::parse(
        "widths = 4,8,8\nfeature_dim = 8\nbaseline_iterations = 20\nexpansion_iterations = 6\nshrinkage_iterations = 6\nbatch_size = 4\ntrain_count = 16\neval_count = 4\nscales = 1,2\nseed = 5\n",
    )
    .unwrap();
    (generate(&cfg.gen_config()).unwrap(), cfg)
}

fn images(data: &Dataset) -> Tensor {
    let ids: Vec<usize> = (0..4).collect();
    data.train_set().batch(&ids).unwrap().0
}

#[test]
fn untrained_expansion_is_clipped_baseline() {
    let (data, cfg) = tiny();
    let (baseline, _) = train_baseline(&data.train_set(), &cfg).unwrap();
    let mc = cfg.model_config();
    let expansion = Model::rewire(&mc, Stage::Expansion, &baseline, Ablation::default(), cfg.beta).unwrap();
    let x = images(&data);

    // oracle: baseline extra conv, relu, clip, then the rest of the baseline
    let backbone = baseline.prefix(&x, Entry::Backbone).unwrap();
    let mut g = Graph::new();
    let h = g.constant(backbone).unwrap();
    let w = g.constant(baseline.es.weight.clone()).unwrap();
    let b = g.constant(baseline.es.bias.clone()).unwrap();
    let h = g.conv2d(h, w, Some(b), 1, 1).unwrap();
    let h = g.relu(h).unwrap();
    let mut clipped = Vec::new();
    for i in 0..4 {
        clipped.push(clip_features(&g.value(h).sample(i).unwrap(), cfg.beta).unwrap());
    }
    let clipped = Tensor::stack(&clipped.iter().collect::<Vec<_>>()).unwrap();
    let (g2, f) = baseline.run_from(Entry::Clipped, &clipped).unwrap();
    let expected = g2.value(f.features);
    let got = expansion.forward_features(&x).unwrap();
    assert!(got.max_abs_diff(expected) < 1e-5);
}

#[test]
fn only_offset_branches_move_after_the_baseline() {
    let (data, cfg) = tiny();
    let run = run_pipeline(&data, &cfg, None).unwrap();
    for (name, t) in run.baseline.params() {
        let e = run.expansion.param(&name).unwrap();
        if name.starts_with("es.offset.") {
            assert_ne!(e, t, "{name} did not train");
        } else {
            assert_eq!(e, t, "{name} drifted in expansion");
        }
        let s = run.shrinkage.param(&name).unwrap();
        if !name.starts_with("ss.offset.") {
            assert_eq!(s, e, "{name} drifted in shrinkage");
        }
    }
    assert_eq!(run.metrics.len(), 3);
    assert_eq!(run.reports.len(), 3);
}

#[test]
fn same_seed_same_checkpoint_bytes() {
    let (data, cfg) = tiny();
    let tmp = tempfile::tempdir().unwrap();
    let mut dirs = Vec::new();
    for run in ["a", "b"] {
        let (m, _) = train_baseline(&data.train_set(), &cfg).unwrap();
        let (e, _) = train_expansion(&data.train_set(), &cfg, &m).unwrap();
        let dir = tmp.path().join(run);
        e.save(&dir).unwrap();
        dirs.push(dir);
    }
    let mut names: Vec<_> = std::fs::read_dir(&dirs[0]).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(names.len() > 3);
    for n in names {
        assert_eq!(std::fs::read(dirs[0].join(&n)).unwrap(), std::fs::read(dirs[1].join(&n)).unwrap());
    }
    let loaded = Model::load(&dirs[0]).unwrap();
    let x = images(&data);
    assert_eq!(
        multiscale_cam(&loaded, &x.sample(0).unwrap(), &[1.0]).unwrap().values,
        multiscale_cam(&loaded, &x.sample(0).unwrap(), &[1.0, 1.0]).unwrap().values
    );
}

#[test]
fn ablation_grid_reuses_one_baseline() {
    let (_, cfg) = tiny();
    let rows = run_ablation_grid(AblationAxis::Losses, &["cls".into(), "area".into(), "cls+area".into()], &cfg).unwrap();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r.seed_miou)));
    assert!(run_ablation_grid(AblationAxis::Alpha, &["-1".into()], &cfg).is_err());
}
