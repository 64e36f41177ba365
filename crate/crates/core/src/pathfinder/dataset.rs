//! Dataset files: 8-bit grayscale PNGs for images, 1-bit PNGs for masks,
//! and a JSON-lines manifest whose first record carries the full config and
//! its hash. Samples are generated in parallel (they are independent per
//! seed) and written atomically.

use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{generate_sample, PathfinderConfig, PathfinderError, Result, SampleMeta};
use crate::tensor::{write_atomic, Tensor};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config: PathfinderConfig,
    pub config_hash: String,
    pub n_samples: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct SampleRecord {
    index: usize,
    image: String,
    mask: String,
    #[serde(flatten)]
    meta: SampleMeta,
}

/// Canonical hash of a config: SHA-256 over its JSON serialization.
pub fn config_hash(config: &PathfinderConfig) -> String {
    let json = serde_json::to_string(config).expect("config serializes");
    let digest = Sha256::digest(json.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn io_err(context: String) -> impl FnOnce(std::io::Error) -> PathfinderError {
    move |source| PathfinderError::Io { context, source }
}

fn encode_gray8(image: &Tensor) -> Vec<u8> {
    let [_, h, w, _] = image.dims();
    let mut buf = Vec::new();
    {
        let mut enc = png::Encoder::new(BufWriter::new(&mut buf), w as u32, h as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().expect("png header");
        let data: Vec<u8> = image
            .data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        writer.write_image_data(&data).expect("png payload");
    }
    buf
}

fn encode_mask1(mask: &Tensor) -> Vec<u8> {
    let [_, h, w, _] = mask.dims();
    let row_bytes = w.div_ceil(8);
    let mut packed = vec![0u8; row_bytes * h];
    for y in 0..h {
        for x in 0..w {
            if mask.data()[y * w + x] > 0.0 {
                packed[y * row_bytes + x / 8] |= 0x80 >> (x % 8);
            }
        }
    }
    let mut buf = Vec::new();
    {
        let mut enc = png::Encoder::new(BufWriter::new(&mut buf), w as u32, h as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::One);
        let mut writer = enc.write_header().expect("png header");
        writer.write_image_data(&packed).expect("png payload");
    }
    buf
}

fn decode_png(path: &Path) -> Result<Tensor> {
    let file = std::fs::File::open(path).map_err(io_err(format!("opening {}", path.display())))?;
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = decoder
        .read_info()
        .map_err(|e| PathfinderError::BadManifest {
            path: path.display().to_string(),
            reason: format!("png: {e}"),
        })?;
    let mut raw = vec![0u8; reader.output_buffer_size()];
    let info = reader
        .next_frame(&mut raw)
        .map_err(|e| PathfinderError::BadManifest {
            path: path.display().to_string(),
            reason: format!("png: {e}"),
        })?;
    let (w, h) = (info.width as usize, info.height as usize);
    let data = match info.bit_depth {
        png::BitDepth::Eight => raw[..w * h].iter().map(|&b| b as f64 / 255.0).collect(),
        png::BitDepth::One => {
            let row_bytes = w.div_ceil(8);
            let mut out = Vec::with_capacity(w * h);
            for y in 0..h {
                for x in 0..w {
                    let bit = raw[y * row_bytes + x / 8] >> (7 - x % 8) & 1;
                    out.push(bit as f64);
                }
            }
            out
        }
        other => {
            return Err(PathfinderError::BadManifest {
                path: path.display().to_string(),
                reason: format!("unsupported bit depth {other:?}"),
            })
        }
    };
    Ok(Tensor::new([1, h, w, 1], data)?)
}

/// Generate `n_samples` samples with seeds `config.seed .. config.seed + n`
/// into `out_dir`, returning the manifest.
pub fn generate_dataset(
    config: &PathfinderConfig,
    n_samples: usize,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    config.validate()?;
    let samples_dir = out_dir.join("samples");
    std::fs::create_dir_all(&samples_dir)
        .map_err(io_err(format!("creating {}", samples_dir.display())))?;

    let records: Vec<Result<SampleRecord>> = (0..n_samples)
        .into_par_iter()
        .map(|i| {
            let seed = config.seed + i as u64;
            let sample = generate_sample(config, seed)?;
            let image_name = format!("samples/sample_{i:06}.png");
            let mask_name = format!("samples/sample_{i:06}_mask.png");
            write_atomic(&out_dir.join(&image_name), &encode_gray8(&sample.image))?;
            write_atomic(&out_dir.join(&mask_name), &encode_mask1(&sample.mask))?;
            Ok(SampleRecord {
                index: i,
                image: image_name,
                mask: mask_name,
                meta: sample.meta,
            })
        })
        .collect();

    let manifest = DatasetManifest {
        config: config.clone(),
        config_hash: config_hash(config),
        n_samples,
    };
    let mut lines = String::new();
    lines.push_str(&serde_json::to_string(&manifest).expect("manifest serializes"));
    lines.push('\n');
    for rec in records {
        let rec = rec?;
        lines.push_str(&serde_json::to_string(&rec).expect("record serializes"));
        lines.push('\n');
    }
    write_atomic(&out_dir.join("manifest.jsonl"), lines.as_bytes())?;
    Ok(manifest)
}

/// A sample loaded back from disk.
#[derive(Clone, Debug)]
pub struct LoadedSample {
    pub index: usize,
    pub seed: u64,
    pub image: Tensor,
    pub mask: Tensor,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<LoadedSample>,
}

/// Read a dataset directory written by [`generate_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.jsonl");
    let text = std::fs::read_to_string(&manifest_path)
        .map_err(io_err(format!("reading {}", manifest_path.display())))?;
    let mut lines = text.lines();
    let head = lines.next().ok_or_else(|| PathfinderError::BadManifest {
        path: manifest_path.display().to_string(),
        reason: "empty manifest".into(),
    })?;
    let manifest: DatasetManifest =
        serde_json::from_str(head).map_err(|e| PathfinderError::BadManifest {
            path: manifest_path.display().to_string(),
            reason: e.to_string(),
        })?;
    let records: Vec<SampleRecord> = lines
        .map(|l| {
            serde_json::from_str(l).map_err(|e| PathfinderError::BadManifest {
                path: manifest_path.display().to_string(),
                reason: e.to_string(),
            })
        })
        .collect::<Result<_>>()?;

    let samples: Vec<Result<LoadedSample>> = records
        .par_iter()
        .map(|rec| {
            Ok(LoadedSample {
                index: rec.index,
                seed: rec.meta.seed,
                image: decode_png(&dir.join(&rec.image))?,
                mask: decode_png(&dir.join(&rec.mask))?,
            })
        })
        .collect();
    let samples: Vec<LoadedSample> = samples.into_iter().collect::<Result<_>>()?;
    Ok(Dataset { manifest, samples })
}

/// Paths of every artifact a dataset directory holds, for hashing.
pub fn dataset_files(dir: &Path, manifest: &DatasetManifest) -> Vec<PathBuf> {
    let mut out = vec![dir.join("manifest.jsonl")];
    for i in 0..manifest.n_samples {
        out.push(dir.join(format!("samples/sample_{i:06}.png")));
        out.push(dir.join(format!("samples/sample_{i:06}_mask.png")));
    }
    out
}
