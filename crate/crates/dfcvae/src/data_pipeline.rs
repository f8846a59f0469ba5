//! CelebA ingestion: annotation parsing, crop/scale preprocessing and
//! shuffled batch streaming.

use indexmap::IndexMap;
use ndarray::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const NUM_ATTRIBUTES: usize = 40;

#[derive(Clone, Debug)]
pub struct AttributeTable {
    pub attribute_names: Vec<String>,
    /// image_id -> 40 values in {-1, +1}
    pub rows: IndexMap<String, Vec<i8>>,
}

impl AttributeTable {
    pub fn attribute_index(&self, name: &str) -> Result<usize> {
        self.attribute_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::config(format!("unknown attribute `{name}`")))
    }

    /// Ids whose value for `name` equals +1 (positive=true) or -1.
    pub fn ids_with(&self, name: &str, positive: bool) -> Result<Vec<String>> {
        let idx = self.attribute_index(name)?;
        let want = if positive { 1 } else { -1 };
        Ok(self
            .rows
            .iter()
            .filter(|(_, v)| v[idx] == want)
            .map(|(id, _)| id.clone())
            .collect())
    }

    pub fn serialize(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{}", self.rows.len());
        let _ = writeln!(out, "{}", self.attribute_names.join(" "));
        for (id, vals) in &self.rows {
            let _ = write!(out, "{id}");
            for v in vals {
                let _ = write!(out, " {v}");
            }
            let _ = writeln!(out);
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct LandmarkTable {
    /// image_id -> 5 (x, y) points: eyes, nose, mouth corners
    pub rows: IndexMap<String, [(f64, f64); 5]>,
}

pub fn parse_attribute_file(path: impl AsRef<Path>) -> Result<AttributeTable> {
    let text = std::fs::read_to_string(path)?;
    parse_attribute_text(&text)
}

pub fn parse_attribute_text(text: &str) -> Result<AttributeTable> {
    let mut lines = text.lines().enumerate();
    let (_, count_line) = lines
        .next()
        .ok_or_else(|| Error::Parse { line: 1, msg: "empty file".into() })?;
    let expected: usize = count_line.trim().parse().map_err(|_| Error::Parse {
        line: 1,
        msg: format!("bad count line `{count_line}`"),
    })?;
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Parse { line: 2, msg: "missing header".into() })?;
    let attribute_names: Vec<String> = header.split_whitespace().map(String::from).collect();
    if attribute_names.len() != NUM_ATTRIBUTES {
        return Err(Error::Parse {
            line: 2,
            msg: format!(
                "header has {} names, expected {NUM_ATTRIBUTES}",
                attribute_names.len()
            ),
        });
    }
    let mut rows = IndexMap::new();
    for (i, line) in lines {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let id = parts.next().unwrap().to_string();
        let vals: Vec<&str> = parts.collect();
        if vals.len() != NUM_ATTRIBUTES {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("row has {} values, expected {NUM_ATTRIBUTES}", vals.len()),
            });
        }
        let mut parsed = Vec::with_capacity(NUM_ATTRIBUTES);
        for v in vals {
            match v {
                "1" => parsed.push(1),
                "-1" => parsed.push(-1),
                other => {
                    return Err(Error::Parse {
                        line: lineno,
                        msg: format!("value `{other}` outside {{-1, 1}}"),
                    })
                }
            }
        }
        rows.insert(id, parsed);
    }
    if rows.len() != expected {
        return Err(Error::Parse {
            line: 1,
            msg: format!("count line says {expected} rows, found {}", rows.len()),
        });
    }
    Ok(AttributeTable { attribute_names, rows })
}

pub fn parse_landmark_file(path: impl AsRef<Path>) -> Result<LandmarkTable> {
    let text = std::fs::read_to_string(path)?;
    parse_landmark_text(&text)
}

pub fn parse_landmark_text(text: &str) -> Result<LandmarkTable> {
    let mut lines = text.lines().enumerate();
    lines.next(); // count
    lines.next(); // header
    let mut rows = IndexMap::new();
    for (i, line) in lines {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let id = parts.next().unwrap().to_string();
        let coords: Vec<&str> = parts.collect();
        if coords.len() != 10 {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("row has {} coordinates, expected 10", coords.len()),
            });
        }
        let mut pts = [(0.0, 0.0); 5];
        for k in 0..5 {
            let x: f64 = coords[2 * k].parse().map_err(|_| Error::Parse {
                line: lineno,
                msg: format!("bad coordinate `{}`", coords[2 * k]),
            })?;
            let y: f64 = coords[2 * k + 1].parse().map_err(|_| Error::Parse {
                line: lineno,
                msg: format!("bad coordinate `{}`", coords[2 * k + 1]),
            })?;
            pts[k] = (x, y);
        }
        rows.insert(id, pts);
    }
    Ok(LandmarkTable { rows })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CropMode {
    /// Center-crop 148x148 from the aligned image, then resize.
    Center148,
    /// Tight bounding box of the 5 landmarks expanded by a margin per side.
    LandmarkBox,
}

/// Margin factor applied per side in landmark-box mode.
pub const LANDMARK_MARGIN: f64 = 0.4;

#[derive(Clone, Debug)]
pub struct DatasetSpec {
    pub image_dir: PathBuf,
    pub attr_path: PathBuf,
    pub landmark_path: Option<PathBuf>,
    pub crop: CropMode,
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub seed: u64,
    pub out_side: usize,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let test: std::collections::HashSet<&String> = self.test_ids.iter().collect();
        if self.train_ids.iter().any(|id| test.contains(id)) {
            return Err(Error::config("train and test id sets overlap"));
        }
        if self.crop == CropMode::LandmarkBox && self.landmark_path.is_none() {
            return Err(Error::config("landmark_box crop requires landmark_path"));
        }
        Ok(())
    }

    /// Default split: lexicographically last `n_test` ids become the test set.
    pub fn split_last_n(mut ids: Vec<String>, n_test: usize) -> (Vec<String>, Vec<String>) {
        ids.sort();
        let cut = ids.len().saturating_sub(n_test);
        let test = ids.split_off(cut);
        (ids, test)
    }
}

/// Decode an image file to (3, H, W) in [0, 1].
pub fn decode_image(path: impl AsRef<Path>) -> Result<Array3<f64>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::<f64>::zeros((3, h as usize, w as usize));
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = p.0[c] as f64 / 255.0;
        }
    }
    Ok(out)
}

/// Crop a (3, H, W) image to the pixel box [y0, y1) x [x0, x1).
pub fn crop(img: &Array3<f64>, y0: usize, y1: usize, x0: usize, x1: usize) -> Array3<f64> {
    img.slice(s![.., y0..y1, x0..x1]).to_owned()
}

/// Bilinear resize of a (3, H, W) image to (3, side, side).
pub fn bilinear_resize(img: &Array3<f64>, side: usize) -> Array3<f64> {
    let (_, h, w) = img.dim();
    let mut out = Array3::<f64>::zeros((3, side, side));
    for oy in 0..side {
        let sy = ((oy as f64 + 0.5) * h as f64 / side as f64 - 0.5).clamp(0.0, h as f64 - 1.0);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = sy - y0 as f64;
        for ox in 0..side {
            let sx = ((ox as f64 + 0.5) * w as f64 / side as f64 - 0.5).clamp(0.0, w as f64 - 1.0);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = sx - x0 as f64;
            for c in 0..3 {
                let v = img[[c, y0, x0]] * (1.0 - fy) * (1.0 - fx)
                    + img[[c, y0, x1]] * (1.0 - fy) * fx
                    + img[[c, y1, x0]] * fy * (1.0 - fx)
                    + img[[c, y1, x1]] * fy * fx;
                out[[c, oy, ox]] = v;
            }
        }
    }
    out
}

/// Pixel box for center-crop of side `crop_side` (clamped to the image).
pub fn center_crop_box(h: usize, w: usize, crop_side: usize) -> (usize, usize, usize, usize) {
    let side = crop_side.min(h).min(w);
    let y0 = (h - side) / 2;
    let x0 = (w - side) / 2;
    (y0, y0 + side, x0, x0 + side)
}

/// Pixel box around the 5 landmarks with `margin` expansion per side.
pub fn landmark_crop_box(
    points: &[(f64, f64); 5],
    h: usize,
    w: usize,
    margin: f64,
) -> (usize, usize, usize, usize) {
    let min_x = points.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let max_x = points.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let min_y = points.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let max_y = points.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let bw = max_x - min_x;
    let bh = max_y - min_y;
    let x0 = (min_x - margin * bw).floor().max(0.0) as usize;
    let x1 = ((max_x + margin * bw).ceil() as usize + 1).min(w);
    let y0 = (min_y - margin * bh).floor().max(0.0) as usize;
    let y1 = ((max_y + margin * bh).ceil() as usize + 1).min(h);
    (y0, y1.max(y0 + 1), x0, x1.max(x0 + 1))
}

/// Decode, crop and scale a list of ids into one (B, 3, side, side) batch.
pub fn load_and_preprocess(spec: &DatasetSpec, ids: &[String]) -> Result<Array4<f64>> {
    spec.validate()?;
    let landmarks = match spec.crop {
        CropMode::LandmarkBox => Some(parse_landmark_file(
            spec.landmark_path.as_ref().expect("validated"),
        )?),
        CropMode::Center148 => None,
    };
    let side = spec.out_side;
    let mut out = Array4::<f64>::zeros((ids.len(), 3, side, side));
    for (i, id) in ids.iter().enumerate() {
        let img = decode_image(spec.image_dir.join(id))?;
        let (_, h, w) = img.dim();
        let (y0, y1, x0, x1) = match spec.crop {
            CropMode::Center148 => center_crop_box(h, w, 148),
            CropMode::LandmarkBox => {
                let lm = landmarks.as_ref().unwrap();
                let pts = lm.rows.get(id).ok_or_else(|| {
                    Error::config(format!("no landmarks for image `{id}`"))
                })?;
                landmark_crop_box(pts, h, w, LANDMARK_MARGIN)
            }
        };
        let cropped = crop(&img, y0, y1, x0, x1);
        let resized = bilinear_resize(&cropped, side);
        out.slice_mut(s![i, .., .., ..]).assign(&resized);
    }
    Ok(out)
}

/// Deterministic shuffled batch stream over the train split. One full pass
/// per epoch; the final short batch is emitted.
pub struct BatchStream<'a> {
    spec: &'a DatasetSpec,
    order: Vec<String>,
    batch_size: usize,
    cursor: usize,
}

pub fn batches<'a>(
    spec: &'a DatasetSpec,
    batch_size: usize,
    epoch_seed: u64,
) -> Result<BatchStream<'a>> {
    if batch_size == 0 {
        return Err(Error::config("batch_size must be >= 1"));
    }
    if spec.train_ids.is_empty() {
        return Err(Error::config("empty dataset"));
    }
    spec.validate()?;
    let mut order = spec.train_ids.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
    order.shuffle(&mut rng);
    Ok(BatchStream {
        spec,
        order,
        batch_size,
        cursor: 0,
    })
}

impl<'a> Iterator for BatchStream<'a> {
    type Item = Result<(Array4<f64>, Vec<String>)>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let ids: Vec<String> = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        Some(load_and_preprocess(self.spec, &ids).map(|b| (b, ids)))
    }
}

/// The shuffled id order for one epoch, exposed for replay tests.
pub fn epoch_order(spec: &DatasetSpec, epoch_seed: u64) -> Vec<String> {
    let mut order = spec.train_ids.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
    order.shuffle(&mut rng);
    order
}
