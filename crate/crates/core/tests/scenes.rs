use std::path::PathBuf;

use pvo_core::simworld::{dynamic_demo, occlusion_demo, occlusion_free_demo, static_demo, SceneConfig};

fn shipped(name: &str) -> SceneConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenes").join(format!("{name}.toml"));
    SceneConfig::from_toml(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn shipped_scenes_match_builders() {
    assert_eq!(shipped("static_demo"), static_demo(0));
    assert_eq!(shipped("dynamic_demo"), dynamic_demo(0, 16, 0.3));
    assert_eq!(shipped("occlusion_free_demo"), occlusion_free_demo(16));
    assert_eq!(shipped("occlusion_demo"), occlusion_demo(8));
}

#[test]
fn configs_round_trip_through_toml() {
    for cfg in [static_demo(3), dynamic_demo(2, 6, 0.5), occlusion_demo(4)] {
        assert_eq!(SceneConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }
}
