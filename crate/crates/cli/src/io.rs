//! File formats: PNG images, OBJ meshes, checkpoints, dataset labels, logs
//! and artifact manifests.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use image::codecs::png::PngEncoder;
use image::{ExtendedColorType, ImageEncoder};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use trigrid_core::checkpoint::Checkpoint;
use trigrid_core::config::ModelConfig;
use trigrid_core::data::ToySample;
use trigrid_core::mesh::Mesh;
use trigrid_core::Tensor;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// One written file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    /// Path relative to the output directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

/// Writes files below `root` and remembers their hashes.
#[derive(Debug)]
pub struct ArtifactWriter {
    root: PathBuf,
    pub artifacts: Vec<Artifact>,
}

impl ArtifactWriter {
    pub fn new(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("cannot create output directory {}", root.display()))?;
        Ok(Self { root: root.to_path_buf(), artifacts: Vec::new() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, bytes).with_context(|| format!("cannot write {}", path.display()))?;
        self.artifacts.retain(|a| a.path != rel);
        self.artifacts.push(Artifact { path: rel.to_string(), sha256: sha256_hex(bytes), bytes: bytes.len() as u64 });
        Ok(path)
    }

    /// Records a file that was written incrementally (logs).
    pub fn record(&mut self, rel: &str) -> Result<()> {
        let bytes = fs::read(self.root.join(rel))?;
        self.artifacts.retain(|a| a.path != rel);
        self.artifacts.push(Artifact { path: rel.to_string(), sha256: sha256_hex(&bytes), bytes: bytes.len() as u64 });
        Ok(())
    }

    /// Writes `<command>.manifest.json` listing every artifact, sorted by path.
    pub fn finish(mut self, command: &str, config_text: &str) -> Result<Manifest> {
        self.artifacts.sort_by(|a, b| a.path.cmp(&b.path));
        let manifest = Manifest { command: command.to_string(), config_sha256: sha256_hex(config_text.as_bytes()), artifacts: self.artifacts };
        let text = serde_json::to_string_pretty(&manifest)? + "\n";
        fs::write(self.root.join(format!("{command}.manifest.json")), text)?;
        Ok(manifest)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_sha256: String,
    pub artifacts: Vec<Artifact>,
}

fn to_u16(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

/// PNG encoding of a `[3, H, W]` image in `[0, 1]`, 8 or 16 bits per channel.
pub fn png_bytes(image: &Tensor, sixteen_bit: bool) -> Result<Vec<u8>> {
    let s = image.shape();
    ensure!(s.len() == 3 && s[0] == 3, "image must be [3, H, W], got {s:?}");
    let (h, w) = (s[1], s[2]);
    let d = image.data();
    let mut out = Vec::new();
    let enc = PngEncoder::new(&mut out);
    if sixteen_bit {
        let mut buf = Vec::with_capacity(h * w * 6);
        for i in 0..h * w {
            for c in 0..3 {
                buf.extend_from_slice(&to_u16(d[c * h * w + i]).to_ne_bytes());
            }
        }
        enc.write_image(&buf, w as u32, h as u32, ExtendedColorType::Rgb16)?;
    } else {
        let buf: Vec<u8> = (0..h * w).flat_map(|i| (0..3).map(move |c| (d[c * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8)).collect();
        enc.write_image(&buf, w as u32, h as u32, ExtendedColorType::Rgb8)?;
    }
    Ok(out)
}

/// Reads any PNG as a `[3, H, W]` image in `[0, 1]`.
pub fn read_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path).with_context(|| format!("cannot read image {}", path.display()))?.to_rgb16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (i, p) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = f64::from(p.0[c]) / 65535.0;
        }
    }
    Ok(Tensor::from_vec(&[3, h, w], data)?)
}

/// Side-by-side concatenation of equally sized `[3, H, W]` images.
pub fn strip(images: &[Tensor]) -> Result<Tensor> {
    ensure!(!images.is_empty(), "no images to concatenate");
    let s = images[0].shape().to_vec();
    let (h, w) = (s[1], s[2]);
    let n = images.len();
    let mut data = vec![0.0; 3 * h * w * n];
    for (k, img) in images.iter().enumerate() {
        ensure!(img.shape() == s.as_slice(), "strip images differ in size");
        for c in 0..3 {
            for y in 0..h {
                let src = &img.data()[(c * h + y) * w..(c * h + y + 1) * w];
                let dst = (c * h + y) * w * n + k * w;
                data[dst..dst + w].copy_from_slice(src);
            }
        }
    }
    Ok(Tensor::from_vec(&[3, h, w * n], data)?)
}

pub fn obj_bytes(mesh: &Mesh) -> Vec<u8> {
    let mut s = String::with_capacity(40 * (mesh.vertices.len() + mesh.triangles.len()));
    s.push_str("# tri-grid density iso-surface\n");
    for v in &mesh.vertices {
        s.push_str(&format!("v {:.6} {:.6} {:.6}\n", v[0], v[1], v[2]));
    }
    for t in &mesh.triangles {
        s.push_str(&format!("f {} {} {}\n", t[0] + 1, t[1] + 1, t[2] + 1));
    }
    s.into_bytes()
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).with_context(|| format!("missing checkpoint {}", path.display()))?;
    Checkpoint::from_bytes(&bytes).with_context(|| format!("cannot load {}", path.display()))
}

/// Dataset label file: `images/` holds the PNGs, `labels.json` the cameras.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelFile {
    pub labels: Vec<LabelEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelEntry {
    /// Image path relative to the dataset directory.
    pub file: String,
    /// 16 extrinsics (camera-to-world, row-major) then 9 intrinsics.
    pub camera: Vec<f64>,
    /// Source W+ stack, row-major `[latent_layers, w_dim]`, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w_plus: Option<Vec<f64>>,
}

/// Writes `dir/images/NNNNN.png` (16-bit) and `dir/labels.json`.
pub fn write_dataset(out: &mut ArtifactWriter, dir: &str, samples: &[ToySample]) -> Result<()> {
    let mut labels = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let file = format!("images/{i:05}.png");
        out.write(&format!("{dir}/{file}"), &png_bytes(&s.image, true)?)?;
        labels.push(LabelEntry { file, camera: s.record.to_vec(), w_plus: Some(s.w_plus.data().to_vec()) });
    }
    let text = serde_json::to_string_pretty(&LabelFile { labels })? + "\n";
    out.write(&format!("{dir}/labels.json"), text.as_bytes())?;
    Ok(())
}

/// Loads a dataset directory. Entries without a stored latent get an empty one.
pub fn read_dataset(dir: &Path, cfg: &ModelConfig) -> Result<Vec<ToySample>> {
    let path = dir.join("labels.json");
    let text = fs::read_to_string(&path).with_context(|| format!("missing dataset labels {}; run `trigrid gen-data` first", path.display()))?;
    let file: LabelFile = serde_json::from_str(&text).with_context(|| format!("malformed {}", path.display()))?;
    if file.labels.is_empty() {
        bail!("dataset {} is empty", dir.display());
    }
    let mut out = Vec::with_capacity(file.labels.len());
    for e in file.labels {
        let record: [f64; 25] = e.camera.as_slice().try_into().map_err(|_| anyhow::anyhow!("{}: camera needs 25 numbers, got {}", e.file, e.camera.len()))?;
        trigrid_core::camera::decode_pose_record(&record).with_context(|| format!("{}: invalid camera", e.file))?;
        let image = read_png(&dir.join(&e.file))?;
        ensure!(image.shape() == [3, cfg.image_res, cfg.image_res], "{}: expected {}×{} pixels", e.file, cfg.image_res, cfg.image_res);
        let w_plus = match e.w_plus {
            Some(w) => Tensor::from_vec(&[cfg.latent_layers, cfg.w_dim], w).with_context(|| format!("{}: latent has the wrong size", e.file))?,
            None => Tensor::zeros(&[0]),
        };
        out.push(ToySample { record, image, w_plus });
    }
    Ok(out)
}

/// Line-delimited JSON log.
pub struct JsonlLog {
    file: fs::File,
}

impl JsonlLog {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self { file: fs::File::create(path).with_context(|| format!("cannot create {}", path.display()))? })
    }

    /// Keeps the lines whose `step` is below `keep_below` and appends after them.
    pub fn resume(path: &Path, keep_below: u64) -> Result<Self> {
        let mut kept = String::new();
        if path.exists() {
            for line in BufReader::new(fs::File::open(path)?).lines() {
                let line = line?;
                let v: serde_json::Value = serde_json::from_str(&line).with_context(|| format!("malformed log line in {}", path.display()))?;
                if v.get("step").and_then(serde_json::Value::as_u64).is_some_and(|s| s < keep_below) {
                    kept.push_str(&line);
                    kept.push('\n');
                }
            }
        }
        fs::write(path, kept)?;
        Ok(Self { file: fs::OpenOptions::new().append(true).open(path)? })
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<()> {
        let mut line = serde_json::to_string(record)?;
        line.push('\n');
        self.file.write_all(line.as_bytes())?;
        Ok(())
    }
}
