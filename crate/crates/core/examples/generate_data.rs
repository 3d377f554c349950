//! Render a small synthetic dataset, then reload one scene and save it
//! next to its label map.
//!
//!     cargo run --release --example generate_data -- [out_dir]

use std::path::PathBuf;

use hparse::harness::report::{hstack, label_image};
use hparse::synth::{make_dataset, DatasetConfig, SceneConfig, SplitSpec, StyleId};

fn main() -> hparse::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| "target/example-runs/generate_data".into());
    let split = |name: &str, size, style| SplitSpec { name: name.into(), size, styles: vec![style] };
    let config = DatasetConfig {
        scene: SceneConfig { image_size: 96, ..Default::default() },
        seed_base: 7,
        max_persons: 4,
        splits: vec![
            split("train", 12, StyleId::Natural),
            split("test_cartoon", 4, StyleId::Cartoon),
            split("test_sketch", 4, StyleId::Sketch),
        ],
    };
    let manifest = make_dataset(&config, &out, true)?;
    for s in &config.splits {
        let persons: usize = manifest.split(&s.name).map(|r| r.num_persons).sum();
        println!("{:<14} {:>3} scenes {:>3} persons", s.name, manifest.split(&s.name).count(), persons);
    }

    let scenes = manifest.load_split("train")?;
    let scene = &scenes[0];
    let size = scene.size();
    let panel = hstack(&[
        scene.image.to_rgb8(),
        label_image(&scene.label_map(), size),
        scene.restyle(StyleId::Cartoon).image.to_rgb8(),
        scene.restyle(StyleId::Sketch).image.to_rgb8(),
    ]);
    let path = out.join("scene0_panel.png");
    panel.save(&path).expect("write png");
    println!("{} persons in scene 0; panel written to {}", scene.instances.len(), path.display());
    Ok(())
}
