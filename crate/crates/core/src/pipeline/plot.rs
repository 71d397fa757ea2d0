use std::path::Path;

use crate::backbone::MelSpectrogram;
use crate::config::N_MELS;
use crate::error::{Error, Result};

/// Binary PGM bytes of a mel: 80 rows by T columns, highest mel bin on
/// top, values scaled to 0..=255 between the image minimum and maximum.
/// A constant mel renders as uniform gray 128.
pub fn mel_to_pgm(mel: &MelSpectrogram) -> Vec<u8> {
    let t = mel.len();
    let data = mel.frames.data();
    let lo = data.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = format!("P5\n{t} {N_MELS}\n255\n").into_bytes();
    for bin in (0..N_MELS).rev() {
        for frame in 0..t {
            let v = data[frame * N_MELS + bin];
            out.push(if hi > lo { ((v - lo) / (hi - lo) * 255.0).round() as u8 } else { 128 });
        }
    }
    out
}

pub fn plot_mel(mel: &MelSpectrogram, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, mel_to_pgm(mel)).map_err(|e| Error::io(path, e))
}
