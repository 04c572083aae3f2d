//! Grayscale image export for inspection.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use super::{Instrument, LensScene};

/// Writes an 8-bit binary PGM with an asinh stretch between the image's
/// minimum and maximum.
pub fn write_pgm(path: &Path, image: &[f64], size: usize) -> std::io::Result<()> {
    let s: Vec<f64> = image.iter().map(|v| v.asinh()).collect();
    let lo = s.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P5\n{size} {size}\n255\n")?;
    let bytes: Vec<u8> = s.iter().map(|v| (((v - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8).collect();
    f.write_all(&bytes)?;
    f.flush()
}

#[derive(Serialize)]
struct Sidecar<'a> {
    scene: &'a LensScene,
    instrument: &'a Instrument,
    chi2: Option<f64>,
}

/// `<stem>.pgm` for the observation, `<stem>-model.pgm` for the noiseless
/// render and `<stem>.json` with the parameters.
pub fn write_scene_files(
    dir: &Path,
    stem: &str,
    scene: &LensScene,
    instrument: &Instrument,
    observed: &[f64],
    chi2: Option<f64>,
) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    write_pgm(&dir.join(format!("{stem}.pgm")), observed, instrument.size)?;
    let model = super::render_noiseless(scene, instrument);
    write_pgm(&dir.join(format!("{stem}-model.pgm")), &model, instrument.size)?;
    let json = serde_json::to_string_pretty(&Sidecar { scene, instrument, chi2 }).expect("serializable");
    std::fs::write(dir.join(format!("{stem}.json")), json)
}
