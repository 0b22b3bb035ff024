//! Synthetic thin-structure samples, PPM/PGM file I/O, and geometric
//! augmentation.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `(1,3,H,W)` in `[0,1]`.
    pub image: Tensor,
    /// Binary `(1,1,H,W)`.
    pub mask: Tensor,
}

/// One rasterized shape with its declared stroke width in pixels.
#[derive(Clone, Debug, PartialEq)]
pub enum Structure {
    /// Axis-aligned grille inside `[y0, y0+h) × [x0, x0+w)`.
    Lattice {
        y0: usize,
        x0: usize,
        h: usize,
        w: usize,
        spacing: usize,
        width: usize,
    },
    /// Straight strokes radiating from a hub.
    Spokes {
        cy: f64,
        cx: f64,
        length: f64,
        angles: Vec<f64>,
        width: usize,
    },
    /// Circle outline.
    Ring { cy: f64, cx: f64, radius: f64, width: usize },
}

impl Structure {
    pub fn width(&self) -> usize {
        match self {
            Structure::Lattice { width, .. } | Structure::Spokes { width, .. } | Structure::Ring { width, .. } => *width,
        }
    }

    pub fn covers(&self, y: usize, x: usize) -> bool {
        match *self {
            Structure::Lattice {
                y0,
                x0,
                h,
                w,
                spacing,
                width,
            } => {
                if y < y0 || y >= y0 + h || x < x0 || x >= x0 + w {
                    return false;
                }
                (y - y0) % spacing < width || (x - x0) % spacing < width
            }
            Structure::Spokes {
                cy,
                cx,
                length,
                ref angles,
                width,
            } => {
                let (py, px) = (y as f64, x as f64);
                let half = width as f64 / 2.0;
                angles.iter().any(|&a| {
                    let (dy, dx) = (a.sin(), a.cos());
                    let t = ((py - cy) * dy + (px - cx) * dx).clamp(0.0, length);
                    let (ny, nx) = (cy + t * dy, cx + t * dx);
                    ((py - ny).powi(2) + (px - nx).powi(2)).sqrt() <= half
                })
            }
            Structure::Ring { cy, cx, radius, width } => {
                let d = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt();
                (d - radius).abs() <= width as f64 / 2.0
            }
        }
    }

    /// The structure alone as a boolean `size × size` raster.
    pub fn rasterize(&self, size: usize) -> Vec<bool> {
        (0..size * size).map(|i| self.covers(i / size, i % size)).collect()
    }
}

/// A generated sample plus the structures composing its mask.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub sample: Sample,
    pub structures: Vec<Structure>,
}

/// Declared lattice stroke widths, drawn uniformly.
pub const LATTICE_WIDTHS: [usize; 3] = [1, 2, 3];
/// Declared spoke widths, drawn uniformly.
pub const SPOKE_WIDTHS: [usize; 4] = [1, 2, 3, 4];
/// Declared ring widths, drawn uniformly.
pub const RING_WIDTHS: [usize; 5] = [2, 3, 4, 5, 6];

fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

fn draw_structure<R: Rng>(rng: &mut R, size: usize, kind: usize, thin: bool) -> Structure {
    let s = size as f64;
    match kind {
        0 => {
            let h = rng.gen_range(size / 4..=size / 2);
            let w = rng.gen_range(size / 4..=size / 2);
            let lo = (size / 32).max(4);
            Structure::Lattice {
                y0: rng.gen_range(0..size - h),
                x0: rng.gen_range(0..size - w),
                h,
                w,
                spacing: rng.gen_range(lo..=3 * lo),
                width: LATTICE_WIDTHS[rng.gen_range(0..LATTICE_WIDTHS.len())],
            }
        }
        1 => {
            let n = rng.gen_range(3..=8);
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            let angles = (0..n)
                .map(|i| phase + std::f64::consts::TAU * i as f64 / n as f64)
                .collect();
            let width = if thin {
                1
            } else {
                SPOKE_WIDTHS[rng.gen_range(0..SPOKE_WIDTHS.len())]
            };
            Structure::Spokes {
                cy: rng.gen_range(0.3 * s..0.7 * s),
                cx: rng.gen_range(0.3 * s..0.7 * s),
                length: rng.gen_range(s / 6.0..s / 3.0),
                angles,
                width,
            }
        }
        _ => Structure::Ring {
            cy: rng.gen_range(0.3 * s..0.7 * s),
            cx: rng.gen_range(0.3 * s..0.7 * s),
            radius: rng.gen_range(s / 10.0..s / 4.0),
            width: RING_WIDTHS[rng.gen_range(0..RING_WIDTHS.len())],
        },
    }
}

fn render_sample(seed: u64, index: usize, size: usize) -> SyntheticSample {
    let mut rng = sample_rng(seed, index);
    // two of every three samples carry one-pixel spokes
    let thin = index % 3 != 2;
    let count = rng.gen_range(1..=3usize);
    let mut kinds: Vec<usize> = (0..count).map(|_| rng.gen_range(0..3)).collect();
    if thin && !kinds.contains(&1) {
        kinds[0] = 1;
    }
    let structures: Vec<Structure> = kinds
        .iter()
        .map(|&k| draw_structure(&mut rng, size, k, thin && k == 1))
        .collect();

    let base: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.15..0.85));
    let fg: [f64; 3] = std::array::from_fn(|c| if base[c] > 0.5 { rng.gen_range(0.0..0.15) } else { rng.gen_range(0.85..1.0) });
    let freq: [f64; 2] = std::array::from_fn(|_| rng.gen_range(2.0..8.0) * std::f64::consts::TAU / size as f64);
    let phase: [f64; 2] = std::array::from_fn(|_| rng.gen_range(0.0..std::f64::consts::TAU));

    let plane = size * size;
    let mut image = vec![0.0; 3 * plane];
    let mut mask = vec![0.0; plane];
    for y in 0..size {
        for x in 0..size {
            let i = y * size + x;
            let on = structures.iter().any(|s| s.covers(y, x));
            let texture = 0.08 * (freq[0] * y as f64 + phase[0]).sin() * (freq[1] * x as f64 + phase[1]).cos();
            for c in 0..3 {
                let noise = rng.gen_range(-0.04..0.04);
                let v = if on { fg[c] + noise } else { base[c] + texture + noise };
                image[c * plane + i] = v.clamp(0.0, 1.0);
            }
            if on {
                mask[i] = 1.0;
            }
        }
    }
    SyntheticSample {
        sample: Sample {
            id: format!("syn_{index:05}"),
            image: Tensor::new(&[1, 3, size, size], image),
            mask: Tensor::new(&[1, 1, size, size], mask),
        },
        structures,
    }
}

/// Deterministic synthetic dataset. Two of every three samples contain
/// one-pixel spokes, which are thinner than `size/128` for `size ≥ 256`.
pub fn generate_synthetic(seed: u64, count: usize, size: usize) -> Result<Vec<SyntheticSample>> {
    if size == 0 || !size.is_multiple_of(64) {
        return Err(Error::geometry("spatial", format!("size {size} must be a positive multiple of 64")));
    }
    if count == 0 {
        return Err(Error::Invalid("sample count must be at least 1".into()));
    }
    let out = par::map_range(count, |i| {
        // rejection keeps masks non-empty even if every shape fell off the canvas
        let mut attempt = 0;
        loop {
            let s = render_sample(seed.wrapping_add(attempt * 0x9E37_79B9), i, size);
            if s.sample.mask.sum() > 0.0 {
                return s;
            }
            attempt += 1;
        }
    });
    Ok(out)
}

/// A fully drawn augmentation: flip, crop window, rotation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentPlan {
    pub flip: bool,
    /// `(y0, x0, h, w)` of the crop in the flipped frame.
    pub crop: (f64, f64, f64, f64),
    /// Radians.
    pub angle: f64,
}

pub const MAX_ROTATION_DEG: f64 = 15.0;
pub const MIN_CROP_AREA: f64 = 0.75;

impl AugmentPlan {
    pub fn identity(h: usize, w: usize) -> Self {
        AugmentPlan {
            flip: false,
            crop: (0.0, 0.0, h as f64, w as f64),
            angle: 0.0,
        }
    }

    pub fn draw<R: Rng>(rng: &mut R, h: usize, w: usize) -> Self {
        let flip = rng.gen_bool(0.5);
        let area = rng.gen_range(MIN_CROP_AREA..=1.0f64);
        let side = area.sqrt();
        let (ch, cw) = (side * h as f64, side * w as f64);
        let y0 = rng.gen_range(0.0..=h as f64 - ch);
        let x0 = rng.gen_range(0.0..=w as f64 - cw);
        let angle = rng.gen_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG).to_radians();
        AugmentPlan {
            flip,
            crop: (y0, x0, ch, cw),
            angle,
        }
    }

    /// Source coordinate (pixel centers) read by output pixel `(y, x)`.
    pub fn source(&self, y: f64, x: f64, h: usize, w: usize) -> (f64, f64) {
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let (s, c) = self.angle.sin_cos();
        // undo rotation
        let (dy, dx) = (y - cy, x - cx);
        let u = cy + c * dy + s * dx;
        let v = cx - s * dy + c * dx;
        // undo crop-and-resize
        let (y0, x0, ch, cw) = self.crop;
        let fy = (u + 0.5) * ch / h as f64 - 0.5 + y0;
        let fx = (v + 0.5) * cw / w as f64 - 0.5 + x0;
        // undo flip
        let fx = if self.flip { w as f64 - 1.0 - fx } else { fx };
        (fy, fx)
    }

    /// Where source pixel `(y, x)` lands in the output.
    pub fn forward(&self, y: f64, x: f64, h: usize, w: usize) -> (f64, f64) {
        let x = if self.flip { w as f64 - 1.0 - x } else { x };
        let (y0, x0, ch, cw) = self.crop;
        let u = (y - y0 + 0.5) * h as f64 / ch - 0.5;
        let v = (x - x0 + 0.5) * w as f64 / cw - 0.5;
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let (s, c) = self.angle.sin_cos();
        let (du, dv) = (u - cy, v - cx);
        (cy + c * du - s * dv, cx + s * du + c * dv)
    }

    pub fn apply(&self, sample: &Sample) -> Sample {
        let (_, ci, h, w) = sample.image.dims4();
        let mut image = Tensor::zeros(sample.image.shape());
        let mut mask = Tensor::zeros(sample.mask.shape());
        let src = sample.image.data();
        let msrc = sample.mask.data();
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = self.source(y as f64, x as f64, h, w);
                // nearest neighbour for the mask
                let (ny, nx) = (sy.round(), sx.round());
                if ny >= 0.0 && nx >= 0.0 && (ny as usize) < h && (nx as usize) < w {
                    let v = msrc[ny as usize * w + nx as usize];
                    mask.data_mut()[y * w + x] = if v >= 0.5 { 1.0 } else { 0.0 };
                }
                // bilinear for the image, zero outside
                let (y0, x0) = (sy.floor(), sx.floor());
                let (ty, tx) = (sy - y0, sx - x0);
                for c in 0..ci {
                    let plane = &src[c * h * w..(c + 1) * h * w];
                    let at = |yy: f64, xx: f64| {
                        if yy < 0.0 || xx < 0.0 || yy as usize >= h || xx as usize >= w {
                            0.0
                        } else {
                            plane[yy as usize * w + xx as usize]
                        }
                    };
                    let v = (1.0 - ty) * ((1.0 - tx) * at(y0, x0) + tx * at(y0, x0 + 1.0))
                        + ty * ((1.0 - tx) * at(y0 + 1.0, x0) + tx * at(y0 + 1.0, x0 + 1.0));
                    image.data_mut()[c * h * w + y * w + x] = v;
                }
            }
        }
        Sample {
            id: sample.id.clone(),
            image,
            mask,
        }
    }
}

/// Seeded flip, crop and rotation. Draws that would empty a non-empty mask
/// are re-drawn; after repeated failures the sample is returned unchanged.
pub fn augment(sample: &Sample, seed: u64) -> Sample {
    let (_, _, h, w) = sample.image.dims4();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let had_fg = sample.mask.sum() > 0.0;
    for _ in 0..8 {
        let plan = AugmentPlan::draw(&mut rng, h, w);
        let out = plan.apply(sample);
        if !had_fg || out.mask.sum() > 0.0 {
            return out;
        }
    }
    sample.clone()
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn image_err(path: &Path, source: image::ImageError) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

fn write_pnm(path: &Path, bytes: &[u8], w: usize, h: usize, color: bool) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let subtype = if color {
        PnmSubtype::Pixmap(SampleEncoding::Binary)
    } else {
        PnmSubtype::Graymap(SampleEncoding::Binary)
    };
    let ct = if color { ExtendedColorType::Rgb8 } else { ExtendedColorType::L8 };
    let mut writer = BufWriter::new(file);
    PnmEncoder::new(&mut writer)
        .with_subtype(subtype)
        .write_image(bytes, w as u32, h as u32, ct)
        .map_err(|e| image_err(path, e))?;
    writer.flush().map_err(|e| Error::io(path, e))
}

/// Writes a `(1,3,H,W)` image as 8-bit binary PPM.
pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    let (b, c, h, w) = image.dims4();
    if b != 1 || c != 3 {
        return Err(Error::Shape(format!("PPM needs a (1,3,H,W) image, got {:?}", image.shape())));
    }
    let d = image.data();
    let bytes: Vec<u8> = (0..h * w)
        .flat_map(|i| (0..3).map(move |ch| to_u8(d[ch * h * w + i])))
        .collect();
    write_pnm(path, &bytes, w, h, true)
}

/// Writes a `(1,1,H,W)` map as 8-bit binary PGM.
pub fn write_pgm(path: &Path, map: &Tensor) -> Result<()> {
    let (b, c, h, w) = map.dims4();
    if b != 1 || c != 1 {
        return Err(Error::Shape(format!("PGM needs a (1,1,H,W) map, got {:?}", map.shape())));
    }
    let bytes: Vec<u8> = map.data().iter().map(|&v| to_u8(v)).collect();
    write_pnm(path, &bytes, w, h, false)
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| image_err(path, e))
}

/// Reads any PNM image as `(1,3,H,W)` in `[0,1]`.
pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let img = open_image(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.into_raw();
    let mut data = vec![0.0; 3 * h * w];
    for i in 0..h * w {
        for c in 0..3 {
            data[c * h * w + i] = f64::from(raw[i * 3 + c]) / 255.0;
        }
    }
    Ok(Tensor::new(&[1, 3, h, w], data))
}

/// Reads a PNM grayscale map as `(1,1,H,W)` in `[0,1]`.
pub fn read_pgm(path: &Path) -> Result<Tensor> {
    let img = open_image(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.into_raw().into_iter().map(|v| f64::from(v) / 255.0).collect();
    Ok(Tensor::new(&[1, 1, h, w], data))
}

/// Reads a mask, binarizing at one half.
pub fn read_mask(path: &Path) -> Result<Tensor> {
    Ok(read_pgm(path)?.map(|v| if v >= 0.5 { 1.0 } else { 0.0 }))
}

pub const MANIFEST: &str = "manifest.txt";

/// Writes `root/{images,masks}/<id>.{ppm,pgm}` and the manifest.
pub fn write_dataset(root: &Path, samples: &[Sample]) -> Result<()> {
    let images = root.join("images");
    let masks = root.join("masks");
    for d in [&images, &masks] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut manifest = String::new();
    for s in samples {
        let ip = PathBuf::from("images").join(format!("{}.ppm", s.id));
        let mp = PathBuf::from("masks").join(format!("{}.pgm", s.id));
        write_ppm(&root.join(&ip), &s.image)?;
        write_pgm(&root.join(&mp), &s.mask)?;
        manifest.push_str(&format!("{}\t{}\t{}\n", s.id, ip.display(), mp.display()));
    }
    let mpath = root.join(MANIFEST);
    std::fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))
}

/// One manifest line; paths are relative to the dataset root.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub image: PathBuf,
    pub mask: PathBuf,
}

pub fn read_manifest(root: &Path) -> Result<Vec<ManifestEntry>> {
    let path = root.join(MANIFEST);
    let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 {
            return Err(Error::Invalid(format!(
                "{}:{}: expected id<TAB>image<TAB>mask",
                path.display(),
                n + 1
            )));
        }
        out.push(ManifestEntry {
            id: f[0].to_string(),
            image: PathBuf::from(f[1]),
            mask: PathBuf::from(f[2]),
        });
    }
    Ok(out)
}

/// Loads every sample listed in the manifest under `root`.
pub fn load_dataset(root: &Path) -> Result<Vec<Sample>> {
    read_manifest(root)?
        .into_iter()
        .map(|e| {
            let image = read_ppm(&root.join(&e.image))?;
            let mask = read_mask(&root.join(&e.mask))?;
            if image.shape()[2..] != mask.shape()[2..] {
                return Err(Error::Shape(format!(
                    "sample {}: image {:?} vs mask {:?}",
                    e.id,
                    image.shape(),
                    mask.shape()
                )));
            }
            Ok(Sample { id: e.id, image, mask })
        })
        .collect()
}
