//! PNG reading and writing, and the on-disk dataset layout
//! `root/{train,val,test}/{A,B,label}/<name>.png`.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use crate::error::{ensure, Error, Result};
use crate::pipeline::ChipPair;
use crate::substrate::tensor::Tensor;

/// Optional per-split list of name stems, one per line.
pub const MANIFEST_NAME: &str = "manifest.txt";

fn open(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// 8-bit RGB image as `[3,H,W]` in `[0,1]`.
pub fn read_rgb(path: &Path) -> Result<Tensor> {
    let img = open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = px[c] as f64 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// Single-channel image as `[H,W]` in `[0,1]`.
pub fn read_gray(path: &Path) -> Result<Tensor> {
    let img = open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.pixels().map(|p| p[0] as f64 / 255.0).collect();
    Tensor::new(vec![h, w], data)
}

/// Single-channel label as a binary `[H,W]` mask (values above 127 are change).
pub fn read_label(path: &Path) -> Result<Tensor> {
    let img = open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.pixels().map(|p| (p[0] > 127) as u8 as f64).collect();
    Tensor::new(vec![h, w], data)
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn save<P: image::Pixel<Subpixel = u8> + image::PixelWithColorType>(
    img: ImageBuffer<P, Vec<u8>>,
    path: &Path,
) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes a `[3,H,W]` tensor in `[0,1]` as 8-bit RGB.
pub fn write_rgb(path: &Path, t: &Tensor) -> Result<()> {
    ensure!(
        t.rank() == 3 && t.shape()[0] == 3,
        Error::shape("write_rgb", format!("expected [3,H,W], got {:?}", t.shape()))
    );
    let (h, w) = (t.shape()[1], t.shape()[2]);
    let d = t.data();
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        Rgb([to_byte(d[i]), to_byte(d[h * w + i]), to_byte(d[2 * h * w + i])])
    });
    save(img, path)
}

/// Writes an `[H,W]` tensor in `[0,1]` as 8-bit grayscale.
pub fn write_gray(path: &Path, t: &Tensor) -> Result<()> {
    ensure!(
        t.rank() == 2,
        Error::shape("write_gray", format!("expected [H,W], got {:?}", t.shape()))
    );
    let w = t.shape()[1];
    let d = t.data();
    let img = GrayImage::from_fn(w as u32, t.shape()[0] as u32, |x, y| Luma([to_byte(d[y as usize * w + x as usize])]));
    save(img, path)
}

/// Writes an `h×w` RGB image whose pixel `(y, x)` is `colour(y, x)`.
pub fn write_palette(path: &Path, h: usize, w: usize, colour: impl Fn(usize, usize) -> [u8; 3]) -> Result<()> {
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| Rgb(colour(y as usize, x as usize)));
    save(img, path)
}

/// Raw little-endian float32 grid.
pub fn write_f32_grid(path: &Path, t: &Tensor) -> Result<()> {
    let bytes: Vec<u8> = t.data().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Stems listed in `dir/manifest.txt`, or every `*.png` stem under `dir/label`
/// when no manifest exists. Sorted for determinism when scanned.
pub fn list_names(split_dir: &Path) -> Result<Vec<String>> {
    let manifest = split_dir.join(MANIFEST_NAME);
    if manifest.is_file() {
        let text = fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
        return Ok(text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(|l| l.trim_end_matches(".png").to_string())
            .collect());
    }
    let labels = split_dir.join("label");
    let entries = fs::read_dir(&labels).map_err(|e| Error::io(&labels, e))?;
    let mut names = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(&labels, e))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                names.push(stem.to_string());
            }
        }
    }
    names.sort();
    Ok(names)
}

/// Paths of the three files making up sample `name` in a split directory.
pub fn sample_paths(split_dir: &Path, name: &str) -> [PathBuf; 3] {
    let file = format!("{name}.png");
    ["A", "B", "label"].map(|sub| split_dir.join(sub).join(&file))
}

pub fn load_sample(split_dir: &Path, name: &str) -> Result<ChipPair> {
    let [a, b, label] = sample_paths(split_dir, name);
    ChipPair::from_mask(read_rgb(&a)?, read_rgb(&b)?, read_label(&label)?)
        .map_err(|e| Error::Data(format!("sample {name}: {e}")))
}

/// Loads every sample of `root/<split>`.
pub fn load_split(root: &Path, split: &str) -> Result<Vec<(String, ChipPair)>> {
    let dir = root.join(split);
    ensure!(
        dir.is_dir(),
        Error::Data(format!("missing split directory {}", dir.display()))
    );
    let names = list_names(&dir)?;
    ensure!(
        !names.is_empty(),
        Error::Data(format!("no samples in {}", dir.display()))
    );
    names
        .into_iter()
        .map(|n| load_sample(&dir, &n).map(|c| (n, c)))
        .collect()
}

/// Writes a chip in the dataset layout under `split_dir`.
pub fn write_sample(split_dir: &Path, name: &str, chip: &ChipPair) -> Result<()> {
    let [a, b, label] = sample_paths(split_dir, name);
    write_rgb(&a, &chip.t1)?;
    write_rgb(&b, &chip.t2)?;
    write_gray(&label, &chip.mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::synth_dataset;

    fn quantised(t: &Tensor) -> Tensor {
        t.map(|v| to_byte(v) as f64 / 255.0)
    }

    #[test]
    fn sample_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let chips = synth_dataset(2, 16, 3).unwrap();
        let split = dir.path().join("train");
        for (i, c) in chips.iter().enumerate() {
            write_sample(&split, &format!("s{i}"), c).unwrap();
        }
        let loaded = load_split(dir.path(), "train").unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded[1].0, "s1");
        assert_eq!(loaded[1].1.t1, quantised(&chips[1].t1));
        assert_eq!(loaded[1].1.mask, chips[1].mask);
        assert_eq!(loaded[1].1.distance, chips[1].distance);
    }

    #[test]
    fn manifest_selects_names() {
        let dir = tempfile::tempdir().unwrap();
        let split = dir.path().join("val");
        let c = &synth_dataset(1, 8, 0).unwrap()[0];
        write_sample(&split, "a", c).unwrap();
        write_sample(&split, "b", c).unwrap();
        fs::write(split.join(MANIFEST_NAME), "# subset\nb.png\n\n").unwrap();
        assert_eq!(list_names(&split).unwrap(), vec!["b".to_string()]);
    }

    #[test]
    fn missing_split_is_data_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_split(dir.path(), "test"), Err(Error::Data(_))));
    }
}
