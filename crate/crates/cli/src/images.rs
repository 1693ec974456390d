//! PNG and synthetic image sources for the CLI.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clipgen_core::toyworld::ToyWorld;
use clipgen_core::Tensor;

/// Load `[C, H, W]` tensors in [0, 1] from either a directory of PNG files
/// (sorted by name, ids are the file stems) or a synthetic source of the form
/// `synth:COUNT[:SEED]` rendered from the given toy world.
pub fn resolve_images(source: &str, world: &ToyWorld) -> Result<Vec<(String, Tensor)>> {
    if let Some(rest) = source.strip_prefix("synth:") {
        let mut parts = rest.split(':');
        let count: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .context("synth source needs a count, e.g. synth:500 or synth:500:42")?;
        let seed: u64 = match parts.next() {
            Some(s) => s.parse().context("bad synth seed")?,
            None => 100,
        };
        if count == 0 {
            bail!("synth source needs a positive count");
        }
        let samples = world.sample_many(count, seed);
        return Ok(samples
            .into_iter()
            .enumerate()
            .map(|(i, s)| (format!("synth-{seed}-{i:05}"), s.image))
            .collect());
    }

    let dir = Path::new(source);
    if !dir.is_dir() {
        bail!("input {source:?} is neither a directory nor a synth: source");
    }
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("cannot read {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == "png").unwrap_or(false))
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("no .png files in {}", dir.display());
    }
    paths
        .into_iter()
        .map(|p| {
            let id = p
                .file_stem()
                .and_then(|s| s.to_str())
                .map(str::to_string)
                .unwrap_or_else(|| p.display().to_string());
            Ok((id, load_png(&p)?))
        })
        .collect()
}

pub fn load_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .with_context(|| format!("cannot decode {}", path.display()))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f64; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = p.0[c] as f64 / 255.0;
        }
    }
    Ok(Tensor::new(vec![3, h, w], data))
}

pub fn save_png(path: &Path, tensor: &Tensor) -> Result<()> {
    let shape = tensor.shape();
    anyhow::ensure!(shape.len() == 3 && shape[0] == 3, "expected a [3, H, W] tensor");
    let (h, w) = (shape[1], shape[2]);
    let mut img = image::RgbImage::new(w as u32, h as u32);
    let data = tensor.data();
    for y in 0..h {
        for x in 0..w {
            let px = |c: usize| (data[c * h * w + y * w + x].clamp(0.0, 1.0) * 255.0).round() as u8;
            img.put_pixel(x as u32, y as u32, image::Rgb([px(0), px(1), px(2)]));
        }
    }
    img.save(path).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

/// Tile images into a contact sheet with a 2-pixel gutter.
pub fn save_grid(path: &Path, tensors: &[Tensor]) -> Result<()> {
    anyhow::ensure!(!tensors.is_empty(), "no images for the grid");
    let shape = tensors[0].shape();
    let (h, w) = (shape[1], shape[2]);
    let cols = (tensors.len() as f64).sqrt().ceil() as usize;
    let rows = tensors.len().div_ceil(cols);
    let gutter = 2usize;
    let (gh, gw) = (rows * h + (rows + 1) * gutter, cols * w + (cols + 1) * gutter);
    let mut img = image::RgbImage::from_pixel(gw as u32, gh as u32, image::Rgb([20, 20, 20]));
    for (i, t) in tensors.iter().enumerate() {
        anyhow::ensure!(t.shape() == shape, "grid images must share a shape");
        let (r, c) = (i / cols, i % cols);
        let oy = gutter + r * (h + gutter);
        let ox = gutter + c * (w + gutter);
        let data = t.data();
        for y in 0..h {
            for x in 0..w {
                let px = |ch: usize| {
                    (data[ch * h * w + y * w + x].clamp(0.0, 1.0) * 255.0).round() as u8
                };
                img.put_pixel((ox + x) as u32, (oy + y) as u32, image::Rgb([px(0), px(1), px(2)]));
            }
        }
    }
    img.save(path).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}
