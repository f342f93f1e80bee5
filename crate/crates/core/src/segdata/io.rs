use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{from_bytes, quantize, Dataset, Entry, Mask, SegSample, Split};
use crate::error::{bail, Result};

const MANIFEST: &str = "index.json";

#[derive(Serialize, Deserialize)]
struct Manifest {
    num_classes: usize,
    samples: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    id: String,
    image: String,
    mask: Option<String>,
    split: Split,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    generated: bool,
}

/// Binary PGM, maxval 255.
pub fn write_pgm(mut out: impl Write, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        bail!(Dimension, "{} pixels for a {width}x{height} image", pixels.len());
    }
    write!(out, "P5\n{width} {height}\n255\n")?;
    out.write_all(pixels)?;
    Ok(())
}

/// Returns `(width, height, pixels)`.
pub fn read_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => bail!(Format, "PGM header truncated"),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| !b.is_ascii_whitespace()) {
            pos += 1;
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P5" {
        bail!(Format, "not a binary PGM (expected P5)");
    }
    let mut num = |what: &str| -> Result<usize> {
        let t = token()?;
        t.parse().map_err(|_| crate::Error::Format(format!("PGM {what} {t:?} is not a number")))
    };
    let (width, height, maxval) = (num("width")?, num("height")?, num("maxval")?);
    if maxval != 255 {
        bail!(Format, "PGM maxval {maxval}, only 255 is supported");
    }
    if width == 0 || height == 0 {
        bail!(Format, "PGM has zero size");
    }
    // Exactly one whitespace byte separates the header from the raster.
    let start = pos + 1;
    let end = start + width * height;
    if end != bytes.len() {
        bail!(Format, "PGM raster is {} bytes, header implies {}", bytes.len().saturating_sub(start), width * height);
    }
    Ok((width, height, bytes[start..end].to_vec()))
}

fn save_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    let mut buf = Vec::with_capacity(pixels.len() + 16);
    write_pgm(&mut buf, width, height, pixels)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn save_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("masks"))?;
    let mut samples = Vec::with_capacity(data.entries.len());
    for e in &data.entries {
        let s = &e.sample;
        let (h, w) = (s.height(), s.width());
        let image = format!("images/{}.pgm", s.id);
        save_pgm(&dir.join(&image), w, h, &quantize(&s.image))?;
        let mask = match &s.mask {
            Some(m) => {
                if let Some(l) = m.labels.iter().find(|&&l| l as usize >= data.num_classes) {
                    bail!(Format, "sample {} has class {l} >= {}", s.id, data.num_classes);
                }
                let rel = format!("masks/{}.pgm", s.id);
                save_pgm(&dir.join(&rel), m.width, m.height, &m.labels)?;
                Some(rel)
            }
            None => None,
        };
        samples.push(ManifestEntry { id: s.id.clone(), image, mask, split: e.split, generated: e.generated });
    }
    let manifest = Manifest { num_classes: data.num_classes, samples };
    fs::write(dir.join(MANIFEST), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let raw = fs::read(dir.join(MANIFEST))
        .map_err(|e| crate::Error::Format(format!("cannot read {}: {e}", dir.join(MANIFEST).display())))?;
    let manifest: Manifest =
        serde_json::from_slice(&raw).map_err(|e| crate::Error::Format(format!("bad manifest: {e}")))?;
    let mut entries = Vec::with_capacity(manifest.samples.len());
    for m in manifest.samples {
        let (w, h, pixels) = read_pgm(&fs::read(dir.join(&m.image))?)?;
        let image = from_bytes(&pixels, h, w)?;
        let mask = match &m.mask {
            Some(rel) => {
                let (mw, mh, labels) = read_pgm(&fs::read(dir.join(rel))?)?;
                if (mw, mh) != (w, h) {
                    bail!(Format, "mask of {} is {mw}x{mh}, image is {w}x{h}", m.id);
                }
                if let Some(l) = labels.iter().find(|&&l| l as usize >= manifest.num_classes) {
                    bail!(Format, "mask of {} has class {l} >= {}", m.id, manifest.num_classes);
                }
                Some(Mask { height: h, width: w, labels })
            }
            None => None,
        };
        entries.push(Entry { sample: SegSample { id: m.id, image, mask }, split: m.split, generated: m.generated });
    }
    Ok(Dataset { num_classes: manifest.num_classes, entries })
}
