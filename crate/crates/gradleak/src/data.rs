//! CIFAR-10 binary ingestion, synthetic image generation, and bit-exact
//! PPM/CSV export. All loaders and exporters are byte-deterministic.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGE_CHANNELS: usize = 3;
pub const IMAGE_SIDE: usize = 32;
const RECORD_BYTES: usize = 1 + IMAGE_CHANNELS * IMAGE_SIDE * IMAGE_SIDE; // 3073

/// One labelled CIFAR-10 image: 3×32×32, channel order R,G,B, pixels in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct Cifar10Record {
    pub label: usize,
    pub image: Tensor,
}

/// Parse the record at `index` from a CIFAR-10 binary batch file
/// (3073-byte records: label byte, then R, G, B planes row-major).
pub fn load_cifar10(path: &Path, index: usize) -> Result<Cifar10Record> {
    let bytes = fs::read(path)?;
    let records = check_batch_len(&bytes, path)?;
    if index >= records {
        return Err(Error::BadCifar(format!(
            "index {index} out of range for {records} records in {}",
            path.display()
        )));
    }
    parse_record(&bytes[index * RECORD_BYTES..(index + 1) * RECORD_BYTES])
}

/// Parse every record in a batch file.
pub fn load_cifar10_all(path: &Path) -> Result<Vec<Cifar10Record>> {
    let bytes = fs::read(path)?;
    let records = check_batch_len(&bytes, path)?;
    (0..records)
        .map(|i| parse_record(&bytes[i * RECORD_BYTES..(i + 1) * RECORD_BYTES]))
        .collect()
}

fn check_batch_len(bytes: &[u8], path: &Path) -> Result<usize> {
    if bytes.is_empty() || bytes.len() % RECORD_BYTES != 0 {
        return Err(Error::BadCifar(format!(
            "{}: length {} is not a positive multiple of {RECORD_BYTES}",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes.len() / RECORD_BYTES)
}

fn parse_record(rec: &[u8]) -> Result<Cifar10Record> {
    let label = rec[0] as usize;
    if label >= 10 {
        return Err(Error::BadCifar(format!("label byte {label} >= 10")));
    }
    let data = rec[1..].iter().map(|&b| b as f64 / 255.0).collect();
    Ok(Cifar10Record {
        label,
        image: Tensor::new(vec![IMAGE_CHANNELS, IMAGE_SIDE, IMAGE_SIDE], data)?,
    })
}

/// Serialize records into the same 3073-byte batch format.
pub fn write_cifar10(records: &[Cifar10Record], path: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(records.len() * RECORD_BYTES);
    for r in records {
        if r.label >= 10 {
            return Err(Error::BadCifar(format!("label {} >= 10", r.label)));
        }
        bytes.push(r.label as u8);
        for &v in r.image.data() {
            bytes.push(quantize(v));
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn quantize(v: f64) -> u8 {
    // Round half away from zero on [0,1] inputs = round half up.
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthKind {
    Noise,
    GradientRamp,
    Checkerboard,
}

impl std::fmt::Display for SynthKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SynthKind::Noise => "noise",
            SynthKind::GradientRamp => "gradient-ramp",
            SynthKind::Checkerboard => "checkerboard",
        })
    }
}

impl std::str::FromStr for SynthKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noise" => Ok(SynthKind::Noise),
            "gradient-ramp" | "ramp" => Ok(SynthKind::GradientRamp),
            "checkerboard" => Ok(SynthKind::Checkerboard),
            other => Err(Error::InvalidArgument(format!(
                "unknown synthetic image kind '{other}' (noise | gradient-ramp | checkerboard)"
            ))),
        }
    }
}

/// Deterministic 3×32×32 test image in [0,1].
pub fn synth_image(seed: u64, kind: SynthKind) -> Tensor {
    synth_image_sized(seed, kind, IMAGE_SIDE, IMAGE_SIDE)
}

/// Deterministic 3×h×w test image in [0,1] (desk-scale geometries).
pub fn synth_image_sized(seed: u64, kind: SynthKind, h: usize, w: usize) -> Tensor {
    let mut data = Vec::with_capacity(IMAGE_CHANNELS * h * w);
    match kind {
        SynthKind::Noise => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..IMAGE_CHANNELS * h * w {
                data.push(rng.random::<f64>());
            }
        }
        SynthKind::GradientRamp => {
            for c in 0..IMAGE_CHANNELS {
                for y in 0..h {
                    for x in 0..w {
                        let ramp = match c {
                            0 => x as f64 / (w - 1).max(1) as f64,
                            1 => y as f64 / (h - 1).max(1) as f64,
                            _ => (x + y) as f64 / (w + h - 2).max(1) as f64,
                        };
                        data.push(ramp);
                    }
                }
            }
        }
        SynthKind::Checkerboard => {
            for _c in 0..IMAGE_CHANNELS {
                for y in 0..h {
                    for x in 0..w {
                        data.push(if (x + y) % 2 == 0 { 1.0 } else { 0.0 });
                    }
                }
            }
        }
    }
    Tensor::new(vec![IMAGE_CHANNELS, h, w], data).unwrap()
}

/// Write a 3×H×W image as binary PPM (P6, maxval 255), clamping to [0,1]
/// and rounding half up.
pub fn export_ppm(image: &Tensor, path: &Path) -> Result<()> {
    let bytes = ppm_bytes(image)?;
    fs::write(path, bytes)?;
    Ok(())
}

/// The exact bytes `export_ppm` writes.
pub fn ppm_bytes(image: &Tensor) -> Result<Vec<u8>> {
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != IMAGE_CHANNELS {
        return Err(Error::ShapeMismatch {
            op: "export_ppm",
            lhs: shape.to_vec(),
            rhs: vec![IMAGE_CHANNELS, 0, 0],
        });
    }
    let (h, w) = (shape[1], shape[2]);
    let mut out = Vec::with_capacity(32 + IMAGE_CHANNELS * h * w);
    write!(&mut out, "P6\n{w} {h}\n255\n")?;
    let plane = h * w;
    for i in 0..plane {
        for c in 0..IMAGE_CHANNELS {
            out.push(quantize(image.data()[c * plane + i]));
        }
    }
    Ok(out)
}

/// Parse a PPM written by `export_ppm` back into a [0,1] image tensor.
pub fn import_ppm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    let bad = |m: &str| Error::InvalidArgument(format!("bad PPM: {m}"));
    let header_end = bytes
        .iter()
        .enumerate()
        .filter(|(_, &b)| b == b'\n')
        .nth(2)
        .map(|(i, _)| i + 1)
        .ok_or_else(|| bad("missing header"))?;
    let header = std::str::from_utf8(&bytes[..header_end]).map_err(|_| bad("non-ascii header"))?;
    let mut lines = header.lines();
    if lines.next() != Some("P6") {
        return Err(bad("not P6"));
    }
    let dims: Vec<usize> = lines
        .next()
        .ok_or_else(|| bad("missing dimensions"))?
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| bad("bad dimensions")))
        .collect::<Result<_>>()?;
    if dims.len() != 2 || lines.next() != Some("255") {
        return Err(bad("unsupported header"));
    }
    let (w, h) = (dims[0], dims[1]);
    let body = &bytes[header_end..];
    if body.len() != IMAGE_CHANNELS * w * h {
        return Err(bad("truncated pixel data"));
    }
    let plane = w * h;
    let mut data = vec![0.0; IMAGE_CHANNELS * plane];
    for i in 0..plane {
        for c in 0..IMAGE_CHANNELS {
            data[c * plane + i] = body[i * IMAGE_CHANNELS + c] as f64 / 255.0;
        }
    }
    Tensor::new(vec![IMAGE_CHANNELS, h, w], data)
}

/// Write an attack trace as CSV: header `iteration,distance,rmse`, one row
/// per iteration, floats with 9 significant digits, LF endings.
pub fn export_trace_csv(
    records: &[(usize, f64, f64)],
    path: &Path,
) -> Result<()> {
    let mut out = String::from("iteration,distance,rmse\n");
    for &(it, d, r) in records {
        out.push_str(&format!("{it},{},{}\n", sig9(d), sig9(r)));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Format with 9 significant digits.
pub fn sig9(v: f64) -> String {
    format!("{v:.8e}")
}

/// Parse a trace CSV written by `export_trace_csv`.
pub fn import_trace_csv(path: &Path) -> Result<Vec<(usize, f64, f64)>> {
    let text = fs::read_to_string(path)?;
    let bad = |m: String| Error::InvalidArgument(format!("bad trace CSV: {m}"));
    let mut lines = text.lines();
    if lines.next() != Some("iteration,distance,rmse") {
        return Err(bad("missing header".into()));
    }
    lines
        .map(|line| {
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 3 {
                return Err(bad(format!("row '{line}'")));
            }
            Ok((
                parts[0].parse().map_err(|e| bad(format!("{e}")))?,
                parts[1].parse().map_err(|e| bad(format!("{e}")))?,
                parts[2].parse().map_err(|e| bad(format!("{e}")))?,
            ))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn record_offsets_and_format_contract() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("batch.bin");
        // 10 records; record 9 has label 7 and all pixels 255.
        let mut records: Vec<Cifar10Record> = (0..9)
            .map(|i| Cifar10Record {
                label: i % 10,
                image: synth_image(i as u64, SynthKind::Noise),
            })
            .collect();
        records.push(Cifar10Record {
            label: 7,
            image: Tensor::ones(&[3, 32, 32]),
        });
        write_cifar10(&records, &path).unwrap();

        let bytes = fs::read(&path).unwrap();
        assert_eq!(bytes.len(), 10 * 3073);
        assert_eq!(bytes[9 * 3073], 7); // label byte at offset 27657

        let rec = load_cifar10(&path, 9).unwrap();
        assert_eq!(rec.label, 7);
        assert!(rec.image.data().iter().all(|&v| v == 1.0));

        assert!(load_cifar10(&path, 10).is_err());
    }

    #[test]
    fn cifar_roundtrip_is_byte_exact() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.bin");
        let b = dir.path().join("b.bin");
        let records: Vec<Cifar10Record> = (0..3)
            .map(|i| Cifar10Record {
                label: (i * 3) % 10,
                image: synth_image(100 + i as u64, SynthKind::Noise),
            })
            .collect();
        write_cifar10(&records, &a).unwrap();
        let reloaded = load_cifar10_all(&a).unwrap();
        write_cifar10(&reloaded, &b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    }

    #[test]
    fn truncated_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        fs::write(&path, vec![0u8; 3072]).unwrap();
        assert!(matches!(load_cifar10(&path, 0), Err(Error::BadCifar(_))));
    }

    #[test]
    fn bad_label_byte_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        let mut bytes = vec![0u8; 3073];
        bytes[0] = 10;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(load_cifar10(&path, 0), Err(Error::BadCifar(_))));
    }

    #[test]
    fn synth_images_are_deterministic_and_bounded() {
        for kind in [SynthKind::Noise, SynthKind::GradientRamp, SynthKind::Checkerboard] {
            let a = synth_image(5, kind);
            let b = synth_image(5, kind);
            assert_eq!(a, b);
            assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn checkerboard_pattern() {
        let img = synth_image(0, SynthKind::Checkerboard);
        for c in 0..3 {
            assert_eq!(img.data()[c * 1024], 1.0);
            assert_eq!(img.data()[c * 1024 + 1], 0.0);
        }
    }

    #[test]
    fn noise_mean_is_near_half() {
        let img = synth_image(1, SynthKind::Noise);
        let n = img.numel() as f64;
        let mean: f64 = img.data().iter().sum::<f64>() / n;
        // uniform on [0,1): sigma of the mean = 1/sqrt(12 n)
        let sigma = 1.0 / (12.0 * n).sqrt();
        assert!((mean - 0.5).abs() < 3.0 * sigma, "mean = {mean}");
    }

    #[test]
    fn ppm_header_and_rounding() {
        let zeros = Tensor::zeros(&[3, 32, 32]);
        let bytes = ppm_bytes(&zeros).unwrap();
        assert_eq!(&bytes[..15], b"P6\n32 32\n255\n\0\0");
        assert_eq!(bytes.len(), 15 + 3072 - 2);
        assert_eq!(quantize(0.5), 128); // round(127.5) half up
        assert_eq!(quantize(-1.0), 0);
        assert_eq!(quantize(2.0), 255);
    }

    #[test]
    fn ppm_roundtrip_within_quantization_bound() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.ppm");
        let img = synth_image(9, SynthKind::Noise);
        export_ppm(&img, &path).unwrap();
        let back = import_ppm(&path).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 1.0 / 510.0 + 1e-12);
        }
    }

    #[test]
    fn trace_csv_shape_and_parse_back() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        export_trace_csv(&[], &path).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "iteration,distance,rmse\n");

        let rows = vec![(0, 1.25, 0.5), (1, 0.3333333333333, 0.1), (2, 1e-12, 0.05)];
        export_trace_csv(&rows, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 4);
        let back = import_trace_csv(&path).unwrap();
        for ((i1, d1, r1), (i2, d2, r2)) in rows.iter().zip(&back) {
            assert_eq!(i1, i2);
            assert!((d1 - d2).abs() / d1.abs().max(1e-30) < 1e-8);
            assert!((r1 - r2).abs() / r1.abs().max(1e-30) < 1e-8);
        }
    }

    proptest! {
        #[test]
        fn quantize_roundtrip_bound(v in 0.0f64..=1.0) {
            let q = quantize(v) as f64 / 255.0;
            prop_assert!((q - v).abs() <= 1.0 / 510.0 + 1e-12);
        }

        #[test]
        fn cifar_bytes_stable_under_reparse(seed in 0u64..1000) {
            let dir = tempfile::tempdir().unwrap();
            let p1 = dir.path().join("x.bin");
            let p2 = dir.path().join("y.bin");
            let rec = Cifar10Record { label: (seed % 10) as usize, image: synth_image(seed, SynthKind::Noise) };
            write_cifar10(std::slice::from_ref(&rec), &p1).unwrap();
            let back = load_cifar10(&p1, 0).unwrap();
            write_cifar10(std::slice::from_ref(&back), &p2).unwrap();
            prop_assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
        }
    }
}
