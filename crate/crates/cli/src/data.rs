//! Synthetic scenes, PPM/PGM image I/O, and plain-text annotations.
//!
//! Scenes place 1-3 small high-contrast shapes (disc, square, triangle) on a
//! smooth textured background. Object centers sample from a ring around the
//! image center, mirroring the domain assumption that interesting small
//! objects sit away from the gazed central area.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use kbrann_core::head::{iou, GroundTruthBox};
use kbrann_core::tensor::{Shape, Tensor};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{with_context, CliError, Result};

pub const CLASS_NAMES: [&str; 3] = ["disc", "square", "triangle"];

#[derive(Clone, Copy, Debug)]
pub struct SceneConfig {
    pub image_size: usize,
    pub blur: bool,
    pub occlusion: bool,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig { image_size: 128, blur: false, occlusion: false }
    }
}

/// One generated image: 8-bit RGB pixels plus normalized boxes.
pub struct SyntheticScene {
    pub size: usize,
    pub pixels: Vec<u8>,
    pub boxes: Vec<GroundTruthBox>,
}

/// Smallest and largest object side in pixels.
const OBJECT_SIZE_RANGE: (f64, f64) = (6.0, 20.0);
/// Object centers sample their distance from the image center in this range.
const RING_RADIUS_RANGE: (f64, f64) = (0.25, 0.45);

fn bilinear_field(rng: &mut ChaCha8Rng, size: usize) -> Vec<f64> {
    const GRID: usize = 4;
    let mut control = [[0.0f64; GRID]; GRID];
    for row in control.iter_mut() {
        for v in row.iter_mut() {
            *v = rng.random_range(0.15..0.75);
        }
    }
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        let fy = y as f64 / size as f64 * (GRID - 1) as f64;
        let (y0, ty) = (fy as usize, fy.fract());
        let y1 = (y0 + 1).min(GRID - 1);
        for x in 0..size {
            let fx = x as f64 / size as f64 * (GRID - 1) as f64;
            let (x0, tx) = (fx as usize, fx.fract());
            let x1 = (x0 + 1).min(GRID - 1);
            let top = control[y0][x0] * (1.0 - tx) + control[y0][x1] * tx;
            let bot = control[y1][x0] * (1.0 - tx) + control[y1][x1] * tx;
            out[y * size + x] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

fn inside_shape(class_id: usize, fx: f64, fy: f64) -> bool {
    // fx, fy in [-1, 1] relative to the box
    match class_id {
        0 => fx * fx + fy * fy <= 1.0,
        1 => true,
        _ => {
            // upward triangle: apex at the top, base along the bottom
            let t = (fy + 1.0) / 2.0;
            fx.abs() <= t
        }
    }
}

/// Generate one scene from a dedicated RNG stream.
pub fn generate_scene(rng: &mut ChaCha8Rng, cfg: &SceneConfig) -> SyntheticScene {
    let size = cfg.image_size;
    let mut channels: Vec<Vec<f64>> = (0..3).map(|_| bilinear_field(rng, size)).collect();
    for c in channels.iter_mut() {
        for v in c.iter_mut() {
            *v = (*v + rng.random_range(-0.04..0.04)).clamp(0.0, 1.0);
        }
    }

    let n_objects = rng.random_range(1..=3usize);
    let mut boxes: Vec<GroundTruthBox> = Vec::new();
    for _ in 0..n_objects {
        for _attempt in 0..64 {
            let class_id = rng.random_range(0..CLASS_NAMES.len());
            let w_px = rng.random_range(OBJECT_SIZE_RANGE.0..=OBJECT_SIZE_RANGE.1);
            let h_px = if class_id == 2 {
                rng.random_range(OBJECT_SIZE_RANGE.0..=OBJECT_SIZE_RANGE.1)
            } else {
                w_px
            };
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let radius = rng.random_range(RING_RADIUS_RANGE.0..RING_RADIUS_RANGE.1);
            let gt = GroundTruthBox {
                cx: 0.5 + radius * angle.cos(),
                cy: 0.5 + radius * angle.sin(),
                w: w_px / size as f64,
                h: h_px / size as f64,
                class_id,
            };
            let inside = gt.cx - gt.w / 2.0 >= 0.01
                && gt.cx + gt.w / 2.0 <= 0.99
                && gt.cy - gt.h / 2.0 >= 0.01
                && gt.cy + gt.h / 2.0 <= 0.99;
            let overlaps = boxes.iter().any(|b| iou(b.bbox(), gt.bbox()) > 0.1);
            if inside && !overlaps {
                boxes.push(gt);
                break;
            }
        }
    }

    for gt in &boxes {
        // class-characteristic palettes (like sign categories: shape and
        // color co-vary), jittered per object, all contrasting with the
        // mid-range background
        let color: [f64; 3] = match gt.class_id {
            0 => [
                rng.random_range(0.78..1.0),
                rng.random_range(0.0..0.22),
                rng.random_range(0.0..0.22),
            ],
            1 => [
                rng.random_range(0.0..0.22),
                rng.random_range(0.0..0.35),
                rng.random_range(0.78..1.0),
            ],
            _ => [
                rng.random_range(0.78..1.0),
                rng.random_range(0.65..0.95),
                rng.random_range(0.0..0.22),
            ],
        };
        let x0 = ((gt.cx - gt.w / 2.0) * size as f64).floor().max(0.0) as usize;
        let x1 = (((gt.cx + gt.w / 2.0) * size as f64).ceil() as usize).min(size);
        let y0 = ((gt.cy - gt.h / 2.0) * size as f64).floor().max(0.0) as usize;
        let y1 = (((gt.cy + gt.h / 2.0) * size as f64).ceil() as usize).min(size);
        for y in y0..y1 {
            for x in x0..x1 {
                let fx = ((x as f64 + 0.5) / size as f64 - gt.cx) / (gt.w / 2.0);
                let fy = ((y as f64 + 0.5) / size as f64 - gt.cy) / (gt.h / 2.0);
                if fx.abs() <= 1.0 && fy.abs() <= 1.0 && inside_shape(gt.class_id, fx, fy) {
                    for (c, chan) in channels.iter_mut().enumerate() {
                        chan[y * size + x] = color[c];
                    }
                }
            }
        }
        if cfg.occlusion && rng.random_range(0..2) == 0 {
            // gray bar across up to a quarter of the object
            let bw = ((x1 - x0) / 2).max(1);
            let bh = ((y1 - y0) / 4).max(1);
            let bx = rng.random_range(x0..=(x1 - bw).max(x0));
            let by = rng.random_range(y0..=(y1 - bh).max(y0));
            for y in by..(by + bh).min(size) {
                for x in bx..(bx + bw).min(size) {
                    for chan in channels.iter_mut() {
                        chan[y * size + x] = 0.5;
                    }
                }
            }
        }
    }

    if cfg.blur {
        for chan in channels.iter_mut() {
            let src = chan.clone();
            for y in 0..size {
                for x in 0..size {
                    let mut acc = 0.0;
                    let mut cnt = 0.0;
                    for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                            if yy >= 0 && xx >= 0 && (yy as usize) < size && (xx as usize) < size {
                                acc += src[yy as usize * size + xx as usize];
                                cnt += 1.0;
                            }
                        }
                    }
                    chan[y * size + x] = acc / cnt;
                }
            }
        }
    }

    let mut pixels = Vec::with_capacity(size * size * 3);
    for i in 0..size * size {
        for chan in &channels {
            pixels.push((chan[i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    SyntheticScene { size, pixels, boxes }
}

/// RNG stream for image `index` of a dataset seeded with `seed`.
pub fn scene_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub fn write_ppm(path: &Path, size: usize, pixels: &[u8]) -> Result<()> {
    let mut buf = format!("P6\n{size} {size}\n255\n").into_bytes();
    buf.extend_from_slice(pixels);
    fs::write(path, buf).map_err(with_context(&format!("writing {}", path.display())))
}

fn read_token(bytes: &[u8], pos: &mut usize) -> Result<String> {
    // skip whitespace and # comments
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(CliError::Runtime("truncated PPM header".into()));
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

/// Binary 8-bit PPM (P6) reader. Returns (width, height, RGB bytes).
pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(with_context(&format!("reading {}", path.display())))?;
    let mut pos = 0;
    if read_token(&bytes, &mut pos)? != "P6" {
        return Err(CliError::Runtime(format!("{}: not a binary PPM (P6)", path.display())));
    }
    let w: usize = read_token(&bytes, &mut pos)?
        .parse()
        .map_err(|_| CliError::Runtime(format!("{}: bad width", path.display())))?;
    let h: usize = read_token(&bytes, &mut pos)?
        .parse()
        .map_err(|_| CliError::Runtime(format!("{}: bad height", path.display())))?;
    let maxval: usize = read_token(&bytes, &mut pos)?
        .parse()
        .map_err(|_| CliError::Runtime(format!("{}: bad maxval", path.display())))?;
    if maxval != 255 {
        return Err(CliError::Runtime(format!("{}: only maxval 255 supported", path.display())));
    }
    pos += 1; // single whitespace after maxval
    let need = w * h * 3;
    if bytes.len() < pos + need {
        return Err(CliError::Runtime(format!("{}: truncated pixel data", path.display())));
    }
    Ok((w, h, bytes[pos..pos + need].to_vec()))
}

/// Binary 8-bit PGM (P5) writer, for heatmap export.
pub fn write_pgm(path: &Path, w: usize, h: usize, gray: &[u8]) -> Result<()> {
    let mut buf = format!("P5\n{w} {h}\n255\n").into_bytes();
    buf.extend_from_slice(gray);
    fs::write(path, buf).map_err(with_context(&format!("writing {}", path.display())))
}

/// One annotation line per object: `class cx cy w h`, six decimal places.
pub fn write_annotations(path: &Path, boxes: &[GroundTruthBox]) -> Result<()> {
    let mut out = String::new();
    for b in boxes {
        out.push_str(&format!(
            "{} {:.6} {:.6} {:.6} {:.6}\n",
            b.class_id, b.cx, b.cy, b.w, b.h
        ));
    }
    fs::write(path, out).map_err(with_context(&format!("writing {}", path.display())))
}

pub fn read_annotations(path: &Path) -> Result<Vec<GroundTruthBox>> {
    let text =
        fs::read_to_string(path).map_err(with_context(&format!("reading {}", path.display())))?;
    let mut boxes = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(CliError::Runtime(format!(
                "{} line {}: expected 5 fields",
                path.display(),
                lineno + 1
            )));
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse().map_err(|_| {
                CliError::Runtime(format!("{} line {}: bad number {s:?}", path.display(), lineno + 1))
            })
        };
        boxes.push(GroundTruthBox {
            class_id: fields[0].parse().map_err(|_| {
                CliError::Runtime(format!("{} line {}: bad class id", path.display(), lineno + 1))
            })?,
            cx: parse(fields[1])?,
            cy: parse(fields[2])?,
            w: parse(fields[3])?,
            h: parse(fields[4])?,
        });
    }
    Ok(boxes)
}

/// Write `count` scenes (PPM plus sidecar annotations) into `out_dir`.
/// Deterministic for a given seed: image i always derives from stream i.
pub fn generate_dataset(out_dir: &Path, count: usize, seed: u64, cfg: &SceneConfig) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(with_context(&format!("creating {}", out_dir.display())))?;
    for i in 0..count {
        let mut rng = scene_rng(seed, i as u64);
        let scene = generate_scene(&mut rng, cfg);
        let stem = format!("img_{i:05}");
        write_ppm(&out_dir.join(format!("{stem}.ppm")), scene.size, &scene.pixels)?;
        write_annotations(&out_dir.join(format!("{stem}.txt")), &scene.boxes)?;
    }
    Ok(())
}

/// A loaded image with its annotations.
pub struct Sample {
    pub stem: String,
    pub image: Tensor,
    pub boxes: Vec<GroundTruthBox>,
}

/// Convert 8-bit RGB to a (1,3,h,w) tensor in [0,1].
pub fn image_tensor(w: usize, h: usize, pixels: &[u8]) -> Result<Tensor> {
    let shape = Shape::new(1, 3, h, w).map_err(CliError::from)?;
    let mut t = Tensor::zeros(shape);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = pixels[(y * w + x) * 3 + c] as f64 / 255.0;
                t.data_mut()[shape.offset(0, c, y, x)] = v;
            }
        }
    }
    Ok(t)
}

pub fn load_image(path: &Path) -> Result<Tensor> {
    let (w, h, pixels) = read_ppm(path)?;
    image_tensor(w, h, &pixels)
}

/// Load every `*.ppm` (sorted by name) with its `.txt` sidecar.
pub fn load_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let mut stems: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(with_context(&format!("reading {}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "ppm"))
        .collect();
    stems.sort();
    if stems.is_empty() {
        return Err(CliError::Runtime(format!("no .ppm images found in {}", dir.display())));
    }
    let mut samples = Vec::with_capacity(stems.len());
    for ppm in stems {
        let image = load_image(&ppm)?;
        let boxes = read_annotations(&ppm.with_extension("txt"))?;
        samples.push(Sample {
            stem: ppm.file_stem().unwrap_or_default().to_string_lossy().into_owned(),
            image,
            boxes,
        });
    }
    Ok(samples)
}

/// Min-max scale a map to 8-bit grayscale; constant maps render as zeros.
pub fn to_gray(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0; values.len()];
    }
    values.iter().map(|v| (((v - lo) / (hi - lo)) * 255.0).round() as u8).collect()
}
