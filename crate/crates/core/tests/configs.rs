use std::path::PathBuf;

use radar_mot::network::Architecture;
use radar_mot::pipeline::PipelineConfig;

fn config_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

#[test]
fn default_toml_matches_built_in_defaults() {
    let cfg = PipelineConfig::load(&config_path("default.toml")).unwrap();
    assert_eq!(cfg, PipelineConfig::default());
}

#[test]
fn smoke_toml_is_the_compact_crowded_preset() {
    let cfg = PipelineConfig::load(&config_path("smoke.toml")).unwrap();
    cfg.validate().unwrap();
    assert_eq!(cfg.architecture, Architecture::compact());
    assert_eq!((cfg.schedule.stage1_epochs, cfg.schedule.stage2_epochs), (4, 2));
    let scene = &cfg.synthetic.scene;
    assert_eq!((scene.n_objects, scene.n_static_objects, scene.n_static), (4, 3, 40));
    assert_eq!(scene.min_object_separation, 2.0);
    assert_eq!(cfg.synthetic.n_sequences, 200);
}

#[test]
fn bad_values_fail_validation() {
    assert!(PipelineConfig::from_toml_str("[eval]\niou_threshold = 1.5\n").is_err());
    assert!(PipelineConfig::from_toml_str("[assoc]\nsinkhorn_iterations = 0\n").is_err());
    assert!(PipelineConfig::from_toml_str("[architecture.backbone]\nglobal_dim = 0\n").is_err());
}
