//! Writes the train and eval splits of a synthetic family to LTTD files.
//!
//! cargo run --example gen_data -- [family] [out_dir]

use latte::data::{generate, DataFile, DataMode, DatasetSpec, Split};
use std::path::PathBuf;

fn main() -> latte::Result<()> {
    let mut args = std::env::args().skip(1);
    let family = args.next().unwrap_or_else(|| "gauss8".into());
    let out = PathBuf::from(args.next().unwrap_or_else(|| "runs/data".into()));
    let mode = match family.as_str() {
        "blobs" | "bars" => DataMode::Grid8,
        _ => DataMode::Points2d,
    };
    let spec = DatasetSpec {
        mode,
        family: family.clone(),
        ..DatasetSpec::default()
    };
    std::fs::create_dir_all(&out).map_err(|e| latte::Error::Input(e.to_string()))?;
    for (split, name) in [(Split::Train, "train"), (Split::Eval, "eval")] {
        let ds = generate(&spec, split)?;
        let path = out.join(format!("{family}_{name}.lttd"));
        DataFile::from_dataset(spec.to_text(), &ds).save(&path)?;
        println!(
            "{name}: {} samples of {} values -> {}",
            ds.len(),
            ds.dim(),
            path.display()
        );
    }
    if let Some(centers) = spec.class_centers() {
        println!("class centres: {centers:?}");
    }
    Ok(())
}
