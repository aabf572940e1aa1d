//! Paired image datasets, image IO, and patch sampling.
//!
//! Layout: `<root>/<split>/input/<name>` and `<root>/<split>/target/<name>`,
//! matched by file name. Images are `[3, H, W]` tensors in `[0, 1]`.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use image::{imageops, ImageBuffer, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::param::RngState;
use crate::tensor::{Real, Tensor};

pub const INPUT_DIR: &str = "input";
pub const TARGET_DIR: &str = "target";
const EXTENSIONS: [&str; 4] = ["png", "ppm", "pnm", "pgm"];

pub fn is_image_path(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Decodes an 8-bit image to `[3, H, W]` with `v / 255`.
pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Ok(Tensor::from_fn(vec![3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        raw[p * 3 + c] as f32 / 255.0
    }))
}

/// Quantizes `[3, H, W]` to 8 bits (clamped, rounded) and writes it; the
/// codec follows the extension.
pub fn save_image<T: Real>(path: &Path, img: &Tensor<T>) -> Result<()> {
    let [c, h, w] = *img.shape() else {
        return Err(crate::error::dim_err("save_image", img.shape(), &[3, 0, 0]));
    };
    if c != 3 {
        return Err(crate::error::dim_err("save_image", img.shape(), &[3, h, w]));
    }
    let d = img.data();
    let buf = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let p = y as usize * w + x as usize;
        Rgb(std::array::from_fn(|ch| to_u8(d[ch * h * w + p].as_f64())))
    });
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[derive(Debug, Clone)]
pub struct ImagePair {
    pub name: String,
    pub input: Tensor<f32>,
    pub target: Tensor<f32>,
}

impl ImagePair {
    pub fn extents(&self) -> (usize, usize) {
        (self.input.shape()[1], self.input.shape()[2])
    }
}

#[derive(Debug, Clone)]
pub struct PairedDataset {
    pub root: PathBuf,
    pub split: String,
    /// Sorted by name.
    pub pairs: Vec<ImagePair>,
    /// Orphans and rejected pairs.
    pub warnings: Vec<String>,
}

fn image_names(dir: &Path) -> Result<BTreeSet<String>> {
    if !dir.is_dir() {
        return Err(Error::Dataset {
            path: dir.to_path_buf(),
            msg: "directory not found".into(),
        });
    }
    let mut names = BTreeSet::new();
    for entry in std::fs::read_dir(dir)? {
        let p = entry?.path();
        if p.is_file() && is_image_path(&p) {
            if let Some(n) = p.file_name().and_then(|n| n.to_str()) {
                names.insert(n.to_string());
            }
        }
    }
    Ok(names)
}

/// Loads every filename-matched pair of `<root>/<split>`.
pub fn load_pairs(root: &Path, split: &str) -> Result<PairedDataset> {
    let base = root.join(split);
    let (in_dir, gt_dir) = (base.join(INPUT_DIR), base.join(TARGET_DIR));
    let inputs = image_names(&in_dir)?;
    let targets = image_names(&gt_dir)?;
    let mut warnings: Vec<String> = inputs
        .symmetric_difference(&targets)
        .map(|n| {
            let side = if inputs.contains(n) { INPUT_DIR } else { TARGET_DIR };
            format!("{n}: only present in {side}/")
        })
        .collect();
    let mut pairs = Vec::new();
    for name in inputs.intersection(&targets) {
        let input = load_image(&in_dir.join(name))?;
        let target = load_image(&gt_dir.join(name))?;
        if input.shape() != target.shape() {
            warnings.push(format!(
                "{name}: extents differ ({:?} vs {:?}), pair skipped",
                &input.shape()[1..],
                &target.shape()[1..]
            ));
            continue;
        }
        pairs.push(ImagePair {
            name: name.clone(),
            input,
            target,
        });
    }
    for w in &warnings {
        log::warn!("{}: {w}", base.display());
    }
    if pairs.is_empty() {
        return Err(Error::Dataset {
            path: base,
            msg: "no matched input/target pairs".into(),
        });
    }
    Ok(PairedDataset {
        root: root.to_path_buf(),
        split: split.to_string(),
        pairs,
        warnings,
    })
}

/// Crop window shared by input and target.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchWindow {
    pub top: usize,
    pub left: usize,
    pub size: usize,
    pub flipped: bool,
}

fn crop(img: &Tensor<f32>, win: PatchWindow) -> Tensor<f32> {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let s = win.size;
    Tensor::from_fn(vec![3, s, s], |i| {
        let (c, y, x) = (i / (s * s), (i / s) % s, i % s);
        let x = if win.flipped { s - 1 - x } else { x };
        img.data()[c * h * w + (win.top + y) * w + win.left + x]
    })
}

/// Bilinear resize of `[3, H, W]`.
pub fn resize(img: &Tensor<f32>, h: usize, w: usize) -> Tensor<f32> {
    let (ih, iw) = (img.shape()[1], img.shape()[2]);
    let src: ImageBuffer<Rgb<f32>, Vec<f32>> = ImageBuffer::from_fn(iw as u32, ih as u32, |x, y| {
        let p = y as usize * iw + x as usize;
        Rgb(std::array::from_fn(|c| img.data()[c * ih * iw + p]))
    });
    let out = imageops::resize(&src, w as u32, h as u32, imageops::FilterType::Triangle);
    Tensor::from_fn(vec![3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        out.as_raw()[p * 3 + c]
    })
}

/// Random `size × size` crop, identical for input and target, with optional
/// shared horizontal flip. Pairs smaller than `size` are first resized up.
pub fn sample_patch(pair: &ImagePair, size: usize, hflip: bool, rng: &mut RngState) -> (Tensor<f32>, Tensor<f32>, PatchWindow) {
    let (mut h, mut w) = pair.extents();
    let (mut input, mut target) = (pair.input.clone(), pair.target.clone());
    if h < size || w < size {
        let (nh, nw) = (h.max(size), w.max(size));
        log::warn!("{}: {h}x{w} is smaller than the {size} patch; resized to {nh}x{nw}", pair.name);
        input = resize(&input, nh, nw);
        target = resize(&target, nh, nw);
        (h, w) = (nh, nw);
    }
    let win = PatchWindow {
        top: rng.below(h - size + 1),
        left: rng.below(w - size + 1),
        size,
        flipped: hflip && rng.coin(),
    };
    (crop(&input, win), crop(&target, win), win)
}

/// Reflect-pads `[C, H, W]` on the bottom/right to multiples of `m`.
pub fn pad_reflect<T: Real>(img: &Tensor<T>, m: usize) -> Result<Tensor<T>> {
    let [c, h, w] = *img.shape() else {
        return Err(crate::error::dim_err("pad_reflect", img.shape(), &[3, 0, 0]));
    };
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    if ph - h >= h.max(2) || pw - w >= w.max(2) {
        return Err(Error::Config(format!("image {h}x{w} too small to reflect-pad to a multiple of {m}")));
    }
    let reflect = |i: usize, n: usize| if i < n { i } else { 2 * (n - 1) - i };
    Ok(Tensor::from_fn(vec![c, ph, pw], |i| {
        let (ch, y, x) = (i / (ph * pw), (i / pw) % ph, i % pw);
        img.data()[ch * h * w + reflect(y, h) * w + reflect(x, w)]
    }))
}

/// Top-left `h × w` crop of `[C, H', W']`.
pub fn crop_to<T: Real>(img: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let (c, ih, iw) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    Tensor::from_fn(vec![c, h, w], |i| {
        let (ch, y, x) = (i / (h * w), (i / w) % h, i % w);
        img.data()[ch * ih * iw + y * iw + x]
    })
}

/// Stacks `[3, H, W]` images into `[B, 3, H, W]`.
pub fn stack<T: Real>(imgs: &[Tensor<f32>]) -> Result<Tensor<T>> {
    let first = imgs.first().ok_or_else(|| Error::Config("cannot stack an empty batch".into()))?;
    let mut shape = vec![imgs.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(first.numel() * imgs.len());
    for t in imgs {
        if t.shape() != first.shape() {
            return Err(crate::error::dim_err("stack", first.shape(), t.shape()));
        }
        data.extend(t.data().iter().map(|&v| T::of(v as f64)));
    }
    Tensor::new(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(path: &Path, h: usize, w: usize, seed: u64) {
        let mut rng = RngState::new(seed);
        let t = rng.uniform_tensor::<f64>(vec![3, h, w], 0.0, 1.0);
        save_image(path, &t).unwrap();
    }

    fn layout(root: &Path) -> (PathBuf, PathBuf) {
        let i = root.join("train").join(INPUT_DIR);
        let t = root.join("train").join(TARGET_DIR);
        std::fs::create_dir_all(&i).unwrap();
        std::fs::create_dir_all(&t).unwrap();
        (i, t)
    }

    #[test]
    fn matched_pairs_and_orphans() {
        let dir = tempfile::tempdir().unwrap();
        let (i, t) = layout(dir.path());
        for (k, n) in ["c.png", "a.png", "b.png"].iter().enumerate() {
            write(&i.join(n), 4, 5, k as u64);
            write(&t.join(n), 4, 5, 10 + k as u64);
        }
        write(&i.join("orphan.png"), 4, 5, 99);
        let ds = load_pairs(dir.path(), "train").unwrap();
        let names: Vec<_> = ds.pairs.iter().map(|p| p.name.as_str()).collect();
        assert_eq!(names, ["a.png", "b.png", "c.png"]);
        assert_eq!(ds.warnings.len(), 1);
        assert!(ds.warnings[0].contains("orphan.png"));
    }

    #[test]
    fn mismatched_extents_skipped_and_empty_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (i, t) = layout(dir.path());
        write(&i.join("x.png"), 4, 5, 0);
        write(&t.join("x.png"), 5, 4, 1);
        let err = load_pairs(dir.path(), "train").unwrap_err();
        assert!(matches!(err, Error::Dataset { .. }), "{err}");
        assert!(matches!(load_pairs(dir.path(), "test"), Err(Error::Dataset { .. })));
    }

    #[test]
    fn full_intensity_decodes_to_one() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.ppm");
        save_image(&p, &Tensor::<f64>::ones(vec![3, 2, 3])).unwrap();
        let img = load_image(&p).unwrap();
        assert!(img.data().iter().all(|&v| v == 1.0));
        let q = dir.path().join("w.png");
        let t = Tensor::<f64>::from_fn(vec![3, 2, 2], |i| i as f64 / 11.0);
        save_image(&q, &t).unwrap();
        let back = load_image(&q).unwrap();
        for (a, b) in back.data().iter().zip(t.data()) {
            assert_eq!(*a, to_u8(*b) as f32 / 255.0);
        }
    }

    fn pair(h: usize, w: usize) -> ImagePair {
        let input = Tensor::from_fn(vec![3, h, w], |i| i as f32);
        let target = input.map(|v| v + 0.5);
        ImagePair {
            name: "p".into(),
            input,
            target,
        }
    }

    #[test]
    fn patches_share_window_and_flip() {
        let p = pair(12, 9);
        let mut rng = RngState::new(5);
        let mut flips = 0;
        for _ in 0..1000 {
            let (a, b, win) = sample_patch(&p, 4, true, &mut rng);
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| *y == x + 0.5));
            flips += win.flipped as usize;
            let (y, x) = (win.top, if win.flipped { win.left + 3 } else { win.left });
            assert_eq!(a.data()[0], (y * 9 + x) as f32);
        }
        assert!(flips > 400 && flips < 600);
    }

    #[test]
    fn patches_deterministic_under_seed() {
        let p = pair(10, 10);
        let run = || {
            let mut rng = RngState::new(8);
            (0..20).map(|_| sample_patch(&p, 3, true, &mut rng).2).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn small_images_resized_up() {
        let p = pair(3, 5);
        let (a, b, _) = sample_patch(&p, 6, false, &mut RngState::new(0));
        assert_eq!(a.shape(), &[3, 6, 6]);
        assert_eq!(b.shape(), &[3, 6, 6]);
    }

    #[test]
    fn reflect_pad_and_crop_roundtrip() {
        let t = Tensor::<f64>::from_fn(vec![3, 5, 7], |i| i as f64);
        let p = pad_reflect(&t, 4).unwrap();
        assert_eq!(p.shape(), &[3, 8, 8]);
        // row 5 mirrors row 3
        assert_eq!(p.data()[5 * 8], t.data()[3 * 7]);
        assert_eq!(crop_to(&p, 5, 7), t);
    }
}
