use hcma::harness::{gen_synthetic, RunConfig, Trainer};
use std::path::{Path, PathBuf};

fn shipped_configs() -> Vec<PathBuf> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "toml"))
        .collect();
    paths.sort();
    paths
}

#[test]
fn every_shipped_config_loads_and_validates() {
    let paths = shipped_configs();
    assert!(paths.len() >= 12, "{paths:?}");
    for p in &paths {
        let cfg = RunConfig::load(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        cfg.validate().unwrap_or_else(|e| panic!("{}: {e}", p.display()));
    }
}

#[test]
fn ablations_differ_from_reference_only_where_named() {
    let reference = RunConfig::load(&shipped_configs().into_iter().find(|p| p.ends_with("hcma-ref.toml")).unwrap()).unwrap();
    assert_eq!(reference, RunConfig::default());
    for p in shipped_configs() {
        let cfg = RunConfig::load(&p).unwrap();
        let name = p.file_stem().unwrap().to_str().unwrap().to_owned();
        let mut back = cfg.clone();
        back.model.mism = reference.model.mism;
        back.model.mism_stages = reference.model.mism_stages.clone();
        back.loss.fr_weight = reference.loss.fr_weight;
        back.loss.use_positive = true;
        back.loss.use_boundary = true;
        back.loss.use_negative = true;
        assert_eq!(back, reference, "{name} changes more than its ablated switches");
        if let Some(terms) = name.strip_prefix("ablation-region-") {
            for (term, on) in [
                ("positive", cfg.loss.use_positive),
                ("boundary", cfg.loss.use_boundary),
                ("negative", cfg.loss.use_negative),
            ] {
                assert_eq!(terms.split('-').any(|t| t == term), on, "{name}");
            }
        }
    }
}

#[test]
fn every_shipped_config_takes_a_training_step() {
    for p in shipped_configs() {
        let mut cfg = RunConfig::load(&p).unwrap();
        cfg.data.extent = 16;
        cfg.train.patch = [16; 3];
        cfg.train.batch_size = 1;
        cfg.loss.num_negatives = 16;
        cfg.loss.boundary_dilations = 2;
        cfg.loss.negative_dilations = 2;
        let records = gen_synthetic(1, 16, cfg.seed);
        let mut trainer = Trainer::<f32>::new(cfg, records).unwrap();
        let log = trainer.step().unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        assert!(log.loss.is_finite(), "{}", p.display());
    }
}
