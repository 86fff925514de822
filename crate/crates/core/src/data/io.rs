use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmDecoder, PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageDecoder, ImageEncoder};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{BimodalSample, DataForm, Dataset};
use crate::error::{Error, Result};

pub const MANIFEST_NAME: &str = "manifest.csv";
const FIXED_COLUMNS: [&str; 5] = ["sample_id", "subject_id", "study_id", "path_frontal", "path_lateral"];

/// CheXpert label cell → binary: only a positive mention counts as 1.
pub fn binarize_label(raw: &str) -> Option<u8> {
    match raw.trim() {
        "1" | "1.0" => Some(1),
        "0" | "0.0" | "" | "-1" | "-1.0" => Some(0),
        _ => None,
    }
}

/// Binarize one manifest row; `row` is reported on failure.
pub fn binarize_labels(raw: &[&str], path: &Path, row: usize) -> Result<Vec<u8>> {
    raw.iter()
        .enumerate()
        .map(|(j, cell)| {
            binarize_label(cell)
                .ok_or_else(|| Error::parse(path, format!("row {row}, label column {j}: unknown label code {cell:?}")))
        })
        .collect()
}

/// 8-bit grayscale image, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut magic = [0u8; 2];
    reader.read_exact(&mut magic).map_err(|_| Error::parse(path, "file too short for a PGM header"))?;
    if &magic != b"P5" {
        return Err(Error::parse(path, "bad magic: expected binary PGM (P5)"));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let decoder = PnmDecoder::new(bytes.as_slice()).map_err(|e| Error::parse(path, e.to_string()))?;
    if decoder.color_type() != image::ColorType::L8 {
        return Err(Error::parse(path, format!("expected 8-bit grayscale, got {:?}", decoder.color_type())));
    }
    let (w, h) = decoder.dimensions();
    if w == 0 || h == 0 {
        return Err(Error::parse(path, "image has a zero dimension"));
    }
    let mut pixels = vec![0u8; decoder.total_bytes() as usize];
    decoder.read_image(&mut pixels).map_err(|e| Error::parse(path, e.to_string()))?;
    Ok(GrayImage { width: w as usize, height: h as usize, pixels })
}

pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    let mut buf = Vec::new();
    PnmEncoder::new(&mut buf)
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(&img.pixels, img.width as u32, img.height as u32, ExtendedColorType::L8)
        .map_err(|e| Error::contract(format!("encoding {}: {e}", path.display())))?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Vector file: u32 LE length, then that many f64 LE values.
pub fn read_vector(path: &Path) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 4 {
        return Err(Error::parse(path, "missing length prefix"));
    }
    let n = u32::from_le_bytes(bytes[..4].try_into().expect("4 bytes")) as usize;
    if n == 0 {
        return Err(Error::parse(path, "vector has dimension 0"));
    }
    if bytes.len() != 4 + 8 * n {
        return Err(Error::parse(path, format!("length prefix {n} does not match {} payload bytes", bytes.len() - 4)));
    }
    Ok(bytes[4..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
}

pub fn write_vector(path: &Path, values: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(4 + 8 * values.len());
    buf.extend_from_slice(&(values.len() as u32).to_le_bytes());
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Largest centered square; odd margins put the extra pixel on the right/bottom.
pub fn center_crop(img: &GrayImage) -> GrayImage {
    let side = img.width.min(img.height);
    let x0 = (img.width - side) / 2;
    let y0 = (img.height - side) / 2;
    let mut pixels = Vec::with_capacity(side * side);
    for y in y0..y0 + side {
        pixels.extend_from_slice(&img.pixels[y * img.width + x0..y * img.width + x0 + side]);
    }
    GrayImage { width: side, height: side, pixels }
}

/// Bilinear resampling with half-pixel centers; values stay in f64.
pub fn resize_bilinear(src: &[f64], width: usize, height: usize, out_w: usize, out_h: usize) -> Vec<f64> {
    if out_w == width && out_h == height {
        return src.to_vec();
    }
    let coord = |dst: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        let s = ((dst as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, s - lo as f64)
    };
    let mut out = Vec::with_capacity(out_w * out_h);
    for y in 0..out_h {
        let (y0, y1, ty) = coord(y, height, out_h);
        for x in 0..out_w {
            let (x0, x1, tx) = coord(x, width, out_w);
            let top = src[y0 * width + x0] * (1.0 - tx) + src[y0 * width + x1] * tx;
            let bottom = src[y1 * width + x0] * (1.0 - tx) + src[y1 * width + x1] * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadOptions {
    #[serde(default = "default_true")]
    pub center_crop: bool,
    /// Output side length for images; `None` keeps the (cropped) size.
    #[serde(default = "default_side")]
    pub image_side: Option<usize>,
    /// Label cells hold raw CheXpert codes rather than 0/1.
    #[serde(default)]
    pub raw_labels: bool,
}

fn default_true() -> bool {
    true
}
fn default_side() -> Option<usize> {
    Some(32)
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions { center_crop: true, image_side: default_side(), raw_labels: false }
    }
}

fn is_pgm(path: &str) -> bool {
    path.to_ascii_lowercase().ends_with(".pgm")
}

fn load_view(path: &Path, opts: &LoadOptions) -> Result<(Vec<f64>, Option<usize>)> {
    if !is_pgm(&path.to_string_lossy()) {
        return Ok((read_vector(path)?, None));
    }
    let mut img = read_pgm(path)?;
    if opts.center_crop {
        img = center_crop(&img);
    }
    let scaled: Vec<f64> = img.pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let (w, h) = match opts.image_side {
        Some(0) => return Err(Error::contract("image_side must be positive")),
        Some(s) => (s, s),
        None => (img.width, img.height),
    };
    if w != h {
        return Err(Error::parse(path, format!("image is {w}x{h}; enable center_crop or set image_side")));
    }
    Ok((resize_bilinear(&scaled, img.width, img.height, w, h), Some(w)))
}

/// Read a manifest and every file it references (paths relative to the manifest's directory).
pub fn load_dataset(manifest: &Path, opts: &LoadOptions) -> Result<Dataset> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut reader = csv::Reader::from_path(manifest).map_err(|e| Error::parse(manifest, e.to_string()))?;
    let headers = reader.headers().map_err(|e| Error::parse(manifest, e.to_string()))?.clone();
    if headers.len() <= FIXED_COLUMNS.len() || headers.iter().zip(FIXED_COLUMNS).any(|(h, f)| h != f) {
        return Err(Error::parse(
            manifest,
            format!("header must start with {} followed by at least one label column", FIXED_COLUMNS.join(",")),
        ));
    }
    let label_names: Vec<String> = headers.iter().skip(FIXED_COLUMNS.len()).map(String::from).collect();

    struct Row {
        ids: [String; 5],
        labels: Vec<u8>,
    }
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::parse(manifest, format!("row {line}: {e}")))?;
        if rec.len() != headers.len() {
            return Err(Error::parse(manifest, format!("row {line}: {} fields, expected {}", rec.len(), headers.len())));
        }
        let cells: Vec<&str> = rec.iter().skip(FIXED_COLUMNS.len()).collect();
        let labels = if opts.raw_labels {
            binarize_labels(&cells, manifest, line)?
        } else {
            cells
                .iter()
                .map(|c| match c.trim() {
                    "0" => Ok(0),
                    "1" => Ok(1),
                    other => Err(Error::parse(manifest, format!("row {line}: label {other:?} is not 0/1 (raw codes need raw_labels)"))),
                })
                .collect::<Result<_>>()?
        };
        let ids = std::array::from_fn(|k| rec[k].to_string());
        rows.push(Row { ids, labels });
    }

    let paths: BTreeSet<&str> = rows.iter().flat_map(|r| [r.ids[3].as_str(), r.ids[4].as_str()]).collect();
    let loaded: BTreeMap<&str, (Vec<f64>, Option<usize>)> = paths
        .into_par_iter()
        .map(|p| load_view(&base.join(p), opts).map(|v| (p, v)))
        .collect::<Result<_>>()?;

    let mut form = None;
    let mut samples = Vec::with_capacity(rows.len());
    for (i, r) in rows.iter().enumerate() {
        let (x_f, side_f) = &loaded[r.ids[3].as_str()];
        let (x_l, side_l) = &loaded[r.ids[4].as_str()];
        let this = match (side_f, side_l) {
            (None, None) => DataForm::Vector,
            (Some(s), Some(_)) => DataForm::Image { side: *s },
            _ => return Err(Error::parse(manifest, format!("row {}: frontal and lateral files differ in type", i + 2))),
        };
        if *form.get_or_insert(this) != this {
            return Err(Error::parse(manifest, format!("row {}: mixes vector and image files", i + 2)));
        }
        let [sample_id, subject_id, study_id, pf, pl] = r.ids.clone();
        samples.push(BimodalSample {
            sample_id,
            subject_id,
            study_id,
            frontal_source: pf,
            lateral_source: pl,
            x_f: x_f.clone(),
            x_l: x_l.clone(),
            labels: r.labels.clone(),
        });
    }
    let data = Dataset { label_names, form: form.unwrap_or(DataForm::Vector), samples };
    data.validate().map_err(|e| Error::parse(manifest, e.to_string()))?;
    Ok(data)
}

fn to_pixels(values: &[f64], source: &str) -> Result<Vec<u8>> {
    values
        .iter()
        .map(|&v| {
            let p = (v * 255.0).round();
            if (0.0..=255.0).contains(&p) {
                Ok(p as u8)
            } else {
                Err(Error::contract(format!("{source}: pixel value {v} outside [0, 1]")))
            }
        })
        .collect()
}

/// Write `data` as `dir/manifest.csv` plus one file per distinct view source.
/// Sources are used as relative paths, so they must be safe relative file names.
pub fn write_dataset(data: &Dataset, dir: &Path) -> Result<PathBuf> {
    let mut written = BTreeMap::new();
    for s in &data.samples {
        written.entry(s.frontal_source.as_str()).or_insert(&s.x_f);
        written.entry(s.lateral_source.as_str()).or_insert(&s.x_l);
    }
    for (source, values) in &written {
        if Path::new(source).is_absolute() || source.split('/').any(|c| c == ".." || c.is_empty()) {
            return Err(Error::contract(format!("view source {source:?} is not a safe relative path")));
        }
        let path = dir.join(source);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        match data.form {
            DataForm::Vector => write_vector(&path, values)?,
            DataForm::Image { side } => {
                let img = GrayImage { width: side, height: side, pixels: to_pixels(values, source)? };
                write_pgm(&path, &img)?;
            }
        }
    }
    let manifest = dir.join(MANIFEST_NAME);
    let mut w = csv::Writer::from_path(&manifest).map_err(|e| Error::parse(&manifest, e.to_string()))?;
    let mut header: Vec<&str> = FIXED_COLUMNS.to_vec();
    header.extend(data.label_names.iter().map(String::as_str));
    let csv_err = |e: csv::Error| Error::parse(&manifest, e.to_string());
    w.write_record(&header).map_err(csv_err)?;
    for s in &data.samples {
        let mut rec = vec![
            s.sample_id.clone(),
            s.subject_id.clone(),
            s.study_id.clone(),
            s.frontal_source.clone(),
            s.lateral_source.clone(),
        ];
        rec.extend(s.labels.iter().map(|y| y.to_string()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}
