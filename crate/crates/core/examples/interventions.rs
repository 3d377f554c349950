//! Apply the three test-time interventions to one scene and report how
//! many pixels each one changes.
//!
//!     cargo run --release --example interventions -- [seed]

use hparse::harness::report::hstack;
use hparse::synth::{apply_intervention, generate_scene, InterventionKind, InterventionSpec, SceneConfig, StyleId};

fn main() -> hparse::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(3);
    let cfg = SceneConfig { image_size: 96, ..Default::default() };
    let scene = generate_scene(&cfg, 3, StyleId::Natural, seed)?;
    let mut panels = vec![scene.image.to_rgb8()];
    for kind in InterventionKind::ALL {
        let spec = InterventionSpec::on_limbs(kind, seed);
        let moved = apply_intervention(&scene, &spec)?;
        let changed = scene.image.data.chunks(3).zip(moved.image.data.chunks(3)).filter(|(a, b)| a != b).count();
        let kept_labels = moved.label_map().iter().filter(|&&l| l != 0).count();
        println!("{:<13} changed {:>5} px, {:>5} labelled px left, style {}", kind.name(), changed, kept_labels, moved.style.name());
        panels.push(moved.image.to_rgb8());
    }
    std::fs::create_dir_all("target/example-runs")?;
    hstack(&panels).save("target/example-runs/interventions.png").expect("write png");
    println!("panel written to target/example-runs/interventions.png");
    Ok(())
}
