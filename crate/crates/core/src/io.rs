//! On-disk formats.
//!
//! - Sample files: one ASCII header line `NCMX1 <W> <H> <K> <count>` followed
//!   by a row-major `count × (2·W·H + K)` matrix of little-endian `f64`.
//!   Each row is the image (`W·H`), the label (`K`) and the mask (`W·H`
//!   values in {0, 1}; all ones when the sample has no mask).
//! - Provenance sidecars: tab-separated, one line per generated record.
//! - PGM montages: binary `P5`, one row per record holding the image tile, a
//!   one-pixel separator and the mask tile; rows are separated by one pixel.
//!   Image values are mapped affinely onto 0–255 and the mapping is written
//!   in a header comment.
//! - Model files: header `NCMLP1 <input> <hidden> <classes> <seed> <count>`
//!   followed by `count` little-endian `f64` parameters.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::classifier::{EpochStats, MlpClassifier};
use crate::error::{Error, Result};
use crate::grid::ImageGrid;
use crate::mask::{Mask, Rect, SoftLabel};
use crate::sampler::{GenMethod, GenRecord, MaskOrigin, Provenance, SamplerConfig};

pub const SAMPLE_MAGIC: &str = "NCMX1";
pub const MODEL_MAGIC: &str = "NCMLP1";

/// Gray level of the separators between montage tiles.
pub const SEPARATOR_GRAY: u8 = 128;

#[derive(Debug, Clone, PartialEq)]
pub struct StoredSample {
    pub image: ImageGrid,
    pub label: SoftLabel,
    pub mask: Mask,
}

fn read_header_line<R: BufRead>(reader: &mut R, magic: &str, fields: usize) -> Result<Vec<u64>> {
    let mut line = String::new();
    reader.read_line(&mut line)?;
    let mut parts = line.split_whitespace();
    if parts.next() != Some(magic) {
        return Err(Error::Format(format!("missing {magic} header")));
    }
    let values: Vec<u64> = parts
        .map(|p| {
            p.parse::<u64>()
                .map_err(|_| Error::Format(format!("bad header field '{p}'")))
        })
        .collect::<Result<_>>()?;
    if values.len() != fields {
        return Err(Error::Format(format!(
            "{magic} header needs {fields} fields, got {}",
            values.len()
        )));
    }
    Ok(values)
}

fn read_f64s<R: Read>(reader: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    reader
        .read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("truncated payload: {e}")))?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Writes samples as one flat binary matrix.
pub fn write_samples<'a, I>(path: &Path, samples: I) -> Result<()>
where
    I: IntoIterator<Item = (&'a ImageGrid, &'a SoftLabel, Option<&'a Mask>)>,
{
    let rows: Vec<_> = samples.into_iter().collect();
    let (w, h, k) = match rows.first() {
        Some((img, label, _)) => (img.width(), img.height(), label.num_classes()),
        None => return Err(Error::arg("no samples to write")),
    };
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "{SAMPLE_MAGIC} {w} {h} {k} {}", rows.len())?;
    for (image, label, mask) in rows {
        if image.width() != w || image.height() != h || label.num_classes() != k {
            return Err(Error::arg("samples disagree on shape or class count"));
        }
        for v in image.values().iter().chain(label.probs()) {
            out.write_all(&v.to_le_bytes())?;
        }
        for i in 0..w * h {
            let bit = mask.is_none_or(|m| m.cells()[i]);
            out.write_all(&(if bit { 1.0f64 } else { 0.0 }).to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_samples(path: &Path) -> Result<Vec<StoredSample>> {
    let mut reader = BufReader::new(File::open(path)?);
    let header = read_header_line(&mut reader, SAMPLE_MAGIC, 4)?;
    let (w, h, k, count) = (
        header[0] as usize,
        header[1] as usize,
        header[2] as usize,
        header[3] as usize,
    );
    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let row = read_f64s(&mut reader, 2 * w * h + k)?;
        let image = ImageGrid::new(w, h, row[..w * h].to_vec()).map_err(|e| Error::Format(e.to_string()))?;
        let label = SoftLabel::new(row[w * h..w * h + k].to_vec()).map_err(|e| Error::Format(e.to_string()))?;
        let bits = &row[w * h + k..];
        if bits.iter().any(|b| *b != 0.0 && *b != 1.0) {
            return Err(Error::Format("mask entries must be 0 or 1".into()));
        }
        let mask = Mask::from_fn(w, h, |x, y| bits[y * w + x] == 1.0);
        samples.push(StoredSample { image, label, mask });
    }
    let mut rest = Vec::new();
    reader.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes", rest.len())));
    }
    Ok(samples)
}

/// One sidecar line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceRow {
    pub index: usize,
    pub method: GenMethod,
    pub class_a: usize,
    pub class_b: Option<usize>,
    pub mask_origin: Option<String>,
    pub alpha: Option<f64>,
    pub lambda_sampled: Option<f64>,
    pub lambda_real: f64,
    pub rect_x: Option<f64>,
    pub rect_y: Option<f64>,
    pub rect_w: Option<f64>,
    pub rect_h: Option<f64>,
    pub seed: u64,
    pub sampler: String,
    pub steps: usize,
    pub guidance_scale: f64,
    pub schedule_steps: usize,
}

impl ProvenanceRow {
    pub fn from_provenance(index: usize, p: &Provenance) -> Self {
        let (origin, alpha) = match p.mask_origin {
            Some(MaskOrigin::Sampled { alpha }) => (Some("sampled".to_string()), Some(alpha)),
            Some(MaskOrigin::Lambda { .. }) => (Some("lambda".to_string()), None),
            Some(MaskOrigin::Fixed) => (Some("fixed".to_string()), None),
            None => (None, None),
        };
        Self {
            index,
            method: p.method,
            class_a: p.class_a,
            class_b: p.class_b,
            mask_origin: origin,
            alpha,
            lambda_sampled: p.lambda_sampled,
            lambda_real: p.lambda_real,
            rect_x: p.rect.map(|r| r.x),
            rect_y: p.rect.map(|r| r.y),
            rect_w: p.rect.map(|r| r.w),
            rect_h: p.rect.map(|r| r.h),
            seed: p.seed,
            sampler: p.sampler.kind.tag().to_string(),
            steps: p.sampler.num_inference_steps,
            guidance_scale: p.sampler.guidance_scale,
            schedule_steps: p.sampler.schedule_steps,
        }
    }

    pub fn to_provenance(&self) -> Result<Provenance> {
        let mask_origin = match self.mask_origin.as_deref() {
            None => None,
            Some("sampled") => Some(MaskOrigin::Sampled {
                alpha: self
                    .alpha
                    .ok_or_else(|| Error::Format("sampled mask without alpha".into()))?,
            }),
            Some("lambda") => Some(MaskOrigin::Lambda {
                lambda: self
                    .lambda_sampled
                    .ok_or_else(|| Error::Format("lambda mask without lambda".into()))?,
            }),
            Some("fixed") => Some(MaskOrigin::Fixed),
            Some(other) => return Err(Error::Format(format!("unknown mask origin '{other}'"))),
        };
        let rect = match (self.rect_x, self.rect_y, self.rect_w, self.rect_h) {
            (Some(x), Some(y), Some(w), Some(h)) => Some(Rect { x, y, w, h }),
            _ => None,
        };
        Ok(Provenance {
            method: self.method,
            class_a: self.class_a,
            class_b: self.class_b,
            mask_origin,
            lambda_sampled: self.lambda_sampled,
            lambda_real: self.lambda_real,
            rect,
            seed: self.seed,
            sampler: SamplerConfig {
                kind: self.sampler.parse().map_err(|e: Error| Error::Format(e.to_string()))?,
                num_inference_steps: self.steps,
                guidance_scale: self.guidance_scale,
                schedule_steps: self.schedule_steps,
            },
        })
    }
}

fn tsv_writer(path: &Path) -> Result<csv::Writer<File>> {
    Ok(csv::WriterBuilder::new().delimiter(b'\t').from_path(path)?)
}

fn tsv_reader(path: &Path) -> Result<csv::Reader<File>> {
    Ok(csv::ReaderBuilder::new().delimiter(b'\t').from_path(path)?)
}

pub fn write_provenance(path: &Path, records: &[GenRecord]) -> Result<()> {
    let mut w = tsv_writer(path)?;
    if records.is_empty() {
        // header only
        w.write_record(PROVENANCE_COLUMNS)?;
    }
    for (i, r) in records.iter().enumerate() {
        w.serialize(ProvenanceRow::from_provenance(i, &r.provenance))?;
    }
    w.flush()?;
    Ok(())
}

const PROVENANCE_COLUMNS: [&str; 17] = [
    "index",
    "method",
    "class_a",
    "class_b",
    "mask_origin",
    "alpha",
    "lambda_sampled",
    "lambda_real",
    "rect_x",
    "rect_y",
    "rect_w",
    "rect_h",
    "seed",
    "sampler",
    "steps",
    "guidance_scale",
    "schedule_steps",
];

pub fn read_provenance(path: &Path) -> Result<Vec<ProvenanceRow>> {
    let mut r = tsv_reader(path)?;
    let rows = r
        .deserialize()
        .collect::<std::result::Result<Vec<ProvenanceRow>, _>>()?;
    Ok(rows)
}

/// A grayscale image with its header comments.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub comments: Vec<String>,
    pub pixels: Vec<u8>,
}

impl Pgm {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "P5")?;
        for c in &self.comments {
            writeln!(out, "# {c}")?;
        }
        writeln!(out, "{} {}", self.width, self.height)?;
        writeln!(out, "255")?;
        out.write_all(&self.pixels)?;
        out.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Pgm> {
        let mut reader = BufReader::new(File::open(path)?);
        let mut comments = Vec::new();
        let mut tokens = Vec::new();
        while tokens.len() < 4 {
            let mut line = String::new();
            if reader.read_line(&mut line)? == 0 {
                return Err(Error::Format("truncated PGM header".into()));
            }
            let line = line.trim_end_matches('\n');
            if let Some(c) = line.strip_prefix('#') {
                comments.push(c.trim_start().to_string());
            } else {
                tokens.extend(line.split_whitespace().map(str::to_string));
            }
        }
        if tokens[0] != "P5" || tokens[3] != "255" {
            return Err(Error::Format("expected an 8-bit P5 PGM".into()));
        }
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::Format(format!("bad PGM size '{s}'")))
        };
        let (width, height) = (parse(&tokens[1])?, parse(&tokens[2])?);
        let mut pixels = vec![0u8; width * height];
        reader
            .read_exact(&mut pixels)
            .map_err(|e| Error::Format(format!("truncated PGM: {e}")))?;
        Ok(Pgm {
            width,
            height,
            comments,
            pixels,
        })
    }
}

/// Lays out one row per tile pair: image, separator, mask.
pub fn montage(tiles: &[(&ImageGrid, Option<&Mask>)], comments: Vec<String>) -> Result<Pgm> {
    let (first, _) = tiles.first().ok_or_else(|| Error::arg("montage of zero records"))?;
    let (w, h) = (first.width(), first.height());
    if tiles
        .iter()
        .any(|(img, m)| !img.same_shape(first) || m.is_some_and(|m| m.width() != w || m.height() != h))
    {
        return Err(Error::arg("montage tiles differ in shape"));
    }
    let lo = tiles
        .iter()
        .flat_map(|(i, _)| i.values())
        .copied()
        .fold(f64::INFINITY, f64::min);
    let hi = tiles
        .iter()
        .flat_map(|(i, _)| i.values())
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let to_gray = |v: f64| {
        if span > 0.0 {
            ((v - lo) / span * 255.0).round() as u8
        } else {
            128
        }
    };

    let width = 2 * w + 1;
    let height = tiles.len() * h + tiles.len() - 1;
    let mut pixels = vec![SEPARATOR_GRAY; width * height];
    for (r, (image, mask)) in tiles.iter().enumerate() {
        let top = r * (h + 1);
        for y in 0..h {
            let row = (top + y) * width;
            for x in 0..w {
                pixels[row + x] = to_gray(image.get(x, y));
                pixels[row + w + 1 + x] = if mask.is_none_or(|m| m.get(x, y)) { 255 } else { 0 };
            }
        }
    }
    let mut all = vec![
        format!(
            "noisecutmix montage: {} rows of image | mask, tile {w}x{h}, separator 1 px",
            tiles.len()
        ),
        format!("map: gray = round(255 * (v - {lo}) / ({hi} - {lo})); mask 1 = 255, 0 = 0"),
    ];
    all.extend(comments);
    Ok(Pgm {
        width,
        height,
        comments: all,
        pixels,
    })
}

fn describe(index: usize, p: &Provenance) -> String {
    let mut s = format!(
        "record {index}: method={} class_a={} lambda_real={} seed={} sampler={} steps={} guidance={}",
        p.method.tag(),
        p.class_a,
        p.lambda_real,
        p.seed,
        p.sampler.kind,
        p.sampler.num_inference_steps,
        p.sampler.guidance_scale
    );
    if let Some(b) = p.class_b {
        s.push_str(&format!(" class_b={b}"));
    }
    if let Some(r) = p.rect {
        s.push_str(&format!(" rect=({},{},{},{})", r.x, r.y, r.w, r.h));
    }
    s
}

/// PGM montage of generated images beside their masks, provenance in the
/// header comments.
pub fn export_grid(records: &[GenRecord], path: &Path) -> Result<()> {
    let tiles: Vec<_> = records.iter().map(|r| (&r.image, r.mask.as_ref())).collect();
    let comments = records
        .iter()
        .enumerate()
        .map(|(i, r)| describe(i, &r.provenance))
        .collect();
    montage(&tiles, comments)?.write(path)
}

pub fn write_model(path: &Path, model: &MlpClassifier) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(
        out,
        "{MODEL_MAGIC} {} {} {} {} {}",
        model.input(),
        model.hidden(),
        model.classes(),
        model.seed(),
        model.params().len()
    )?;
    for p in model.params() {
        out.write_all(&p.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_model(path: &Path) -> Result<MlpClassifier> {
    let mut reader = BufReader::new(File::open(path)?);
    let h = read_header_line(&mut reader, MODEL_MAGIC, 5)?;
    let params = read_f64s(&mut reader, h[4] as usize)?;
    MlpClassifier::from_params(h[0] as usize, h[1] as usize, h[2] as usize, h[3], params)
        .map_err(|e| Error::Format(e.to_string()))
}

pub fn write_history(path: &Path, history: &[EpochStats]) -> Result<()> {
    let mut w = tsv_writer(path)?;
    if history.is_empty() {
        w.write_record(["epoch", "train_loss", "train_accuracy", "val_accuracy"])?;
    }
    for h in history {
        w.serialize(h)?;
    }
    w.flush()?;
    Ok(())
}
