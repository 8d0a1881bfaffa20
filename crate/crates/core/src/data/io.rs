use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::synth::{dequantize16, encode16};
use super::{AnnotatedSample, Corpus, OracleMeta, SplitIndices, SynthConfig};
use crate::error::{Error, Result};
use crate::image::{BinaryMask, BoxPrompt, Image};

fn load(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::load(path, e.to_string())
}

fn io(path: &Path, e: std::io::Error) -> Error {
    Error::io(path, e)
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Manifest {
    schema_version: u32,
    #[serde(rename = "H")]
    height: usize,
    #[serde(rename = "W")]
    width: usize,
    #[serde(rename = "A")]
    annotators: usize,
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default)]
    generator: Option<SynthConfig>,
    splits: ManifestSplits,
    samples: Vec<ManifestSample>,
}

#[derive(Serialize, Deserialize)]
struct ManifestSplits {
    train: Vec<String>,
    val: Vec<String>,
    test: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct ManifestSample {
    id: String,
    #[serde(rename = "box")]
    box_prompt: BoxPrompt,
    #[serde(default)]
    box_fallback: bool,
    #[serde(default)]
    oracle: Option<OracleMeta>,
}

fn image_path(dir: &Path, id: &str) -> PathBuf {
    dir.join("images").join(format!("{id}.png"))
}

fn mask_path(dir: &Path, id: &str, k: usize) -> PathBuf {
    dir.join("masks").join(format!("{id}_{k}.png"))
}

fn check_id(id: &str) -> Result<()> {
    if id.is_empty() || !id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
        return Err(Error::Validation(format!("sample id {id:?} is not a plain file stem")));
    }
    Ok(())
}

fn write_png(path: &Path, width: usize, height: usize, depth: png::BitDepth, data: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(depth);
    let mut writer = enc.write_header().map_err(|e| load(path, e))?;
    writer.write_image_data(data).map_err(|e| load(path, e))?;
    writer.finish().map_err(|e| load(path, e))
}

fn read_png(path: &Path, width: usize, height: usize, depth: png::BitDepth) -> Result<Vec<u8>> {
    let file = File::open(path).map_err(|e| io(path, e))?;
    let mut dec = png::Decoder::new(BufReader::new(file));
    dec.set_transformations(png::Transformations::IDENTITY);
    let mut reader = dec.read_info().map_err(|e| load(path, e))?;
    let info = reader.info();
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != depth {
        return Err(load(
            path,
            format!("expected {depth:?}-bit grayscale, found {:?} {:?}", info.color_type, info.bit_depth),
        ));
    }
    if info.width as usize != width || info.height as usize != height {
        return Err(load(
            path,
            format!("image is {}x{}, manifest says {height}x{width}", info.height, info.width),
        ));
    }
    let mut buf = vec![0; reader.output_buffer_size()];
    let frame = reader.next_frame(&mut buf).map_err(|e| load(path, e))?;
    buf.truncate(frame.buffer_size());
    Ok(buf)
}

/// Writes `mask` as an 8-bit grayscale PNG with values 0 and 255.
pub fn save_mask_png(mask: &BinaryMask, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = mask.bits().iter().map(|&b| if b { 255 } else { 0 }).collect();
    write_png(path, mask.width(), mask.height(), png::BitDepth::Eight, &bytes)
}

/// Reads an 8- or 16-bit grayscale PNG as an image in `[0, 1]`.
pub fn load_image_png(path: &Path) -> Result<Image> {
    let file = File::open(path).map_err(|e| io(path, e))?;
    let mut dec = png::Decoder::new(BufReader::new(file));
    dec.set_transformations(png::Transformations::IDENTITY);
    let mut reader = dec.read_info().map_err(|e| load(path, e))?;
    let (w, h, color, depth) = {
        let info = reader.info();
        (info.width as usize, info.height as usize, info.color_type, info.bit_depth)
    };
    if color != png::ColorType::Grayscale {
        return Err(load(path, format!("expected a grayscale image, found {color:?}")));
    }
    let mut buf = vec![0; reader.output_buffer_size()];
    let frame = reader.next_frame(&mut buf).map_err(|e| load(path, e))?;
    buf.truncate(frame.buffer_size());
    let pixels = match depth {
        png::BitDepth::Eight => buf.iter().map(|&v| v as f64 / 255.0).collect(),
        png::BitDepth::Sixteen => buf.chunks_exact(2).map(|c| dequantize16(u16::from_be_bytes([c[0], c[1]]))).collect(),
        other => return Err(load(path, format!("unsupported bit depth {other:?}"))),
    };
    Image::new(h, w, pixels).map_err(|e| load(path, e))
}

/// Writes images, masks and finally the manifest (via rename), so a directory
/// with a manifest is always complete.
pub fn save_dataset(corpus: &Corpus, dir: &Path) -> Result<()> {
    let (h, w) = (corpus.height, corpus.width);
    for s in &corpus.samples {
        check_id(&s.id)?;
        s.validate()?;
        if s.image.height() != h || s.image.width() != w || s.annotations.len() != corpus.annotators {
            return Err(Error::Validation(format!("sample {} does not match the corpus shape", s.id)));
        }
    }
    let manifest_path = dir.join(MANIFEST_FILE);
    if manifest_path.exists() {
        fs::remove_file(&manifest_path).map_err(|e| io(&manifest_path, e))?;
    }
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| io(&p, e))?;
    }
    for s in &corpus.samples {
        let bytes: Vec<u8> = s.image.pixels().iter().flat_map(|&v| encode16(v).to_be_bytes()).collect();
        write_png(&image_path(dir, &s.id), w, h, png::BitDepth::Sixteen, &bytes)?;
        for (k, m) in s.annotations.iter().enumerate() {
            let bytes: Vec<u8> = m.bits().iter().map(|&b| if b { 255 } else { 0 }).collect();
            write_png(&mask_path(dir, &s.id, k), w, h, png::BitDepth::Eight, &bytes)?;
        }
    }

    let ids = |idx: &[usize]| idx.iter().map(|&i| corpus.samples[i].id.clone()).collect();
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        height: h,
        width: w,
        annotators: corpus.annotators,
        seed: corpus.seed,
        generator: corpus.generator.clone(),
        splits: ManifestSplits {
            train: ids(&corpus.splits.train),
            val: ids(&corpus.splits.val),
            test: ids(&corpus.splits.test),
        },
        samples: corpus
            .samples
            .iter()
            .map(|s| ManifestSample {
                id: s.id.clone(),
                box_prompt: s.box_prompt,
                box_fallback: s.box_fallback,
                oracle: s.oracle.clone(),
            })
            .collect(),
    };
    let tmp = dir.join(format!("{MANIFEST_FILE}.tmp"));
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| load(&tmp, e))?;
    let mut f = File::create(&tmp).map_err(|e| io(&tmp, e))?;
    f.write_all(&json).and_then(|_| f.sync_all()).map_err(|e| io(&tmp, e))?;
    fs::rename(&tmp, &manifest_path).map_err(|e| io(&manifest_path, e))
}

pub fn load_dataset(dir: &Path) -> Result<Corpus> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read(&manifest_path).map_err(|e| io(&manifest_path, e))?;
    let m: Manifest = serde_json::from_slice(&text).map_err(|e| load(&manifest_path, e))?;
    if m.schema_version != SCHEMA_VERSION {
        return Err(load(&manifest_path, format!("unsupported schema_version {}", m.schema_version)));
    }
    if m.height == 0 || m.width == 0 || m.annotators == 0 {
        return Err(load(&manifest_path, "H, W and A must be positive"));
    }
    let (h, w) = (m.height, m.width);

    let mut by_id = BTreeMap::new();
    let mut samples = Vec::with_capacity(m.samples.len());
    for (i, ms) in m.samples.into_iter().enumerate() {
        check_id(&ms.id).map_err(|e| load(&manifest_path, e))?;
        if by_id.insert(ms.id.clone(), i).is_some() {
            return Err(load(&manifest_path, format!("duplicate sample id {}", ms.id)));
        }
        let ipath = image_path(dir, &ms.id);
        let raw = read_png(&ipath, w, h, png::BitDepth::Sixteen)?;
        let pixels = raw.chunks_exact(2).map(|c| dequantize16(u16::from_be_bytes([c[0], c[1]]))).collect();
        let image = Image::new(h, w, pixels).map_err(|e| load(&ipath, e))?;

        let mut annotations = Vec::with_capacity(m.annotators);
        for k in 0..m.annotators {
            let mpath = mask_path(dir, &ms.id, k);
            let raw = read_png(&mpath, w, h, png::BitDepth::Eight)?;
            let mut bits = Vec::with_capacity(raw.len());
            for &v in &raw {
                match v {
                    0 => bits.push(false),
                    255 => bits.push(true),
                    other => {
                        return Err(Error::Validation(format!(
                            "{}: mask pixel value {other} is not 0 or 255",
                            mpath.display()
                        )))
                    }
                }
            }
            annotations.push(BinaryMask::new(h, w, bits)?);
        }
        let sample = AnnotatedSample {
            id: ms.id,
            image,
            box_prompt: ms.box_prompt,
            annotations,
            oracle: ms.oracle,
            box_fallback: ms.box_fallback,
        };
        sample.validate().map_err(|e| load(&manifest_path, e))?;
        samples.push(sample);
    }

    let mut assigned = vec![false; samples.len()];
    let mut resolve = |ids: &[String]| -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(ids.len());
        for id in ids {
            let &i = by_id
                .get(id)
                .ok_or_else(|| load(&manifest_path, format!("split lists unknown sample {id}")))?;
            if std::mem::replace(&mut assigned[i], true) {
                return Err(load(&manifest_path, format!("sample {id} appears in more than one split")));
            }
            out.push(i);
        }
        Ok(out)
    };
    let splits = SplitIndices {
        train: resolve(&m.splits.train)?,
        val: resolve(&m.splits.val)?,
        test: resolve(&m.splits.test)?,
    };
    Ok(Corpus {
        height: h,
        width: w,
        annotators: m.annotators,
        seed: m.seed,
        generator: m.generator,
        samples,
        splits,
    })
}
