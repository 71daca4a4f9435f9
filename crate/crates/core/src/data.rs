//! Images (binary PPM), JSON-lines annotations and the synthetic shapes set.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::GroundTruth;
use crate::geometry::BBox;
use crate::tensor::{Shape, Tensor};

fn skip_space_and_comments(bytes: &[u8], mut i: usize) -> usize {
    loop {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
        } else {
            return i;
        }
    }
}

fn header_number(bytes: &[u8], i: &mut usize, what: &str) -> Result<usize> {
    *i = skip_space_and_comments(bytes, *i);
    let start = *i;
    while *i < bytes.len() && bytes[*i].is_ascii_digit() {
        *i += 1;
    }
    std::str::from_utf8(&bytes[start..*i])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Image(format!("ppm: bad {what}")))
}

/// Decode a binary P6 image with maxval 255 into `(1, 3, h, w)` in `[0, 1]`.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(Error::Image("ppm: not a binary P6 file".into()));
    }
    let mut i = 2;
    let w = header_number(bytes, &mut i, "width")?;
    let h = header_number(bytes, &mut i, "height")?;
    let maxval = header_number(bytes, &mut i, "maxval")?;
    if maxval != 255 {
        return Err(Error::Image(format!("ppm: maxval {maxval}, only 255 is supported")));
    }
    if w == 0 || h == 0 {
        return Err(Error::Image("ppm: zero-sized image".into()));
    }
    if i >= bytes.len() || !bytes[i].is_ascii_whitespace() {
        return Err(Error::Image("ppm: missing separator before pixel data".into()));
    }
    let pixels = &bytes[i + 1..];
    let plane = w * h;
    if pixels.len() < 3 * plane {
        return Err(Error::Image(format!(
            "ppm: {} pixel bytes, expected {}",
            pixels.len(),
            3 * plane
        )));
    }
    let mut data = vec![0.0f32; 3 * plane];
    for (p, rgb) in pixels[..3 * plane].chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + p] = rgb[c] as f32 / 255.0;
        }
    }
    Tensor::from_vec(Shape::new(1, 3, h, w), data)
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<Tensor> {
    let p = path.as_ref();
    let bytes = fs::read(p).map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", p.display())))?;
    decode_ppm(&bytes).map_err(|e| match e {
        Error::Image(m) => Error::Image(format!("{}: {m}", p.display())),
        other => other,
    })
}

/// Encode the first image of a batch, rounding to 8 bits.
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let [_, c, h, w] = image.shape().0;
    if c != 3 {
        return Err(Error::shape("encode_ppm", "channels", 3, c));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let to_byte = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                out.push(to_byte(image.at(0, ch, y, x)));
            }
        }
    }
    Ok(out)
}

pub fn write_ppm(path: impl AsRef<Path>, image: &Tensor) -> Result<()> {
    fs::write(path, encode_ppm(image)?)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub image: String,
    #[serde(default)]
    pub boxes: Vec<GroundTruth>,
}

fn check_box(g: &GroundTruth, num_classes: usize) -> std::result::Result<(), String> {
    let b = &g.bbox;
    if !b.is_valid() || b.x1 < 0.0 || b.y1 < 0.0 {
        return Err(format!("invalid box ({}, {}, {}, {})", b.x1, b.y1, b.x2, b.y2));
    }
    if g.class_id >= num_classes {
        return Err(format!("unknown class id {} (num_classes {num_classes})", g.class_id));
    }
    Ok(())
}

/// Parse JSON-lines annotations. Blank lines are skipped; line numbers in
/// errors are 1-based.
pub fn parse_annotations(text: &str, num_classes: usize) -> Result<Vec<DatasetRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Annotation { line: i + 1, msg };
        let rec: DatasetRecord = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        for g in &rec.boxes {
            check_box(g, num_classes).map_err(err)?;
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn read_annotations(path: impl AsRef<Path>, num_classes: usize) -> Result<Vec<DatasetRecord>> {
    let p = path.as_ref();
    let text = fs::read_to_string(p).map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", p.display())))?;
    parse_annotations(&text, num_classes)
}

/// Annotations with their decoded images.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub records: Vec<DatasetRecord>,
    pub images: Vec<Tensor>,
}

impl Dataset {
    /// Image paths resolve relative to the annotation file.
    pub fn load(path: impl AsRef<Path>, num_classes: usize) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut records = Vec::new();
        let mut images = Vec::new();
        let lines: Vec<usize> = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, _)| i + 1)
            .collect();
        for (rec, line) in parse_annotations(&text, num_classes)?.into_iter().zip(lines) {
            let img = read_ppm(root.join(&rec.image))?;
            let (h, w) = (img.shape().h() as f32, img.shape().w() as f32);
            for g in &rec.boxes {
                if g.bbox.x2 > w || g.bbox.y2 > h {
                    return Err(Error::Annotation {
                        line,
                        msg: format!("box outside the {w}x{h} image `{}`", rec.image),
                    });
                }
            }
            records.push(rec);
            images.push(img);
        }
        Ok(Dataset { records, images })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn ground_truths(&self) -> Vec<Vec<GroundTruth>> {
        self.records.iter().map(|r| r.boxes.clone()).collect()
    }
}

/// Shape classes of the synthetic set: red square, green disk, blue triangle.
pub const SYNTH_CLASSES: usize = 3;
const SYNTH_COLORS: [[f32; 3]; SYNTH_CLASSES] = [[0.9, 0.15, 0.15], [0.15, 0.85, 0.2], [0.2, 0.3, 0.95]];

fn inside(class_id: usize, b: &BBox, x: f32, y: f32) -> bool {
    let (cx, cy) = b.center();
    match class_id {
        0 => true,
        1 => {
            let r = b.width() / 2.0;
            (x - cx).powi(2) + (y - cy).powi(2) <= r * r
        }
        _ => {
            let t = (y - b.y1) / b.height();
            (x - cx).abs() <= t * b.width() / 2.0
        }
    }
}

/// One `size`² image with 1 to 3 non-overlapping objects of side 12..=28
/// (scaled with `size / 64`).
pub fn synth_sample(rng: &mut ChaCha8Rng, size: usize) -> (Tensor, Vec<GroundTruth>) {
    let f = size as f32 / 64.0;
    let (lo, hi) = ((12.0 * f).round() as usize, (28.0 * f).round() as usize);
    let mut img = Tensor::zeros(Shape::new(1, 3, size, size));
    let bg: f32 = rng.random_range(0.1..0.4);
    for v in img.data_mut() {
        *v = bg + rng.random_range(-0.03..0.03);
    }
    let count = rng.random_range(1..=3);
    let mut gts: Vec<GroundTruth> = Vec::new();
    let mut attempts = 0;
    while gts.len() < count && attempts < 100 {
        attempts += 1;
        let s = rng.random_range(lo..=hi);
        let x1 = rng.random_range(0..=size - s) as f32;
        let y1 = rng.random_range(0..=size - s) as f32;
        let b = BBox::new(x1, y1, x1 + s as f32, y1 + s as f32);
        let clear = gts.iter().all(|g| {
            b.x2 + 1.0 < g.bbox.x1 || g.bbox.x2 + 1.0 < b.x1 || b.y2 + 1.0 < g.bbox.y1 || g.bbox.y2 + 1.0 < b.y1
        });
        if !clear {
            continue;
        }
        let class_id = rng.random_range(0..SYNTH_CLASSES);
        let jitter: [f32; 3] = std::array::from_fn(|_| rng.random_range(-0.08..0.08));
        for y in b.y1 as usize..b.y2 as usize {
            for x in b.x1 as usize..b.x2 as usize {
                if inside(class_id, &b, x as f32 + 0.5, y as f32 + 0.5) {
                    for c in 0..3 {
                        img.set(0, c, y, x, (SYNTH_COLORS[class_id][c] + jitter[c]).clamp(0.0, 1.0));
                    }
                }
            }
        }
        gts.push(GroundTruth {
            bbox: b,
            class_id,
            difficult: false,
        });
    }
    (img, gts)
}

/// Deterministic in-memory synthetic set.
pub fn synth_dataset(n: usize, size: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(n);
    let mut images = Vec::with_capacity(n);
    for i in 0..n {
        let (img, boxes) = synth_sample(&mut rng, size);
        // Stored images are 8-bit, so quantize to what a reload would see.
        let img = img.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0);
        records.push(DatasetRecord {
            image: format!("img_{i:04}.ppm"),
            boxes,
        });
        images.push(img);
    }
    Dataset { records, images }
}

/// Write a dataset as PPM files plus `annotations.jsonl` under `dir`.
pub fn write_dataset(ds: &Dataset, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let ann = dir.join("annotations.jsonl");
    let mut f = fs::File::create(&ann)?;
    for (rec, img) in ds.records.iter().zip(&ds.images) {
        write_ppm(dir.join(&rec.image), img)?;
        writeln!(f, "{}", serde_json::to_string(rec)?)?;
    }
    Ok(ann)
}
