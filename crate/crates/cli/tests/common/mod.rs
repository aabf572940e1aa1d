#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use omamba::data::{save_image, INPUT_DIR, TARGET_DIR};
use omamba::Tensor;

pub fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_omamba"));
    c.env("RUST_LOG", "warn");
    c
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn omamba")
}

pub fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Smooth target with a disc; the input is a per-channel attenuation plus
/// a constant veil.
pub fn synthetic_pair(seed: u64, h: usize, w: usize) -> (Tensor<f32>, Tensor<f32>) {
    let target = Tensor::<f32>::from_fn(vec![3, h, w], |i| {
        let (c, y, x) = (i / (h * w), (i / w) % h, i % w);
        let v = 0.5 + 0.3 * ((x as f32 * 0.2 + seed as f32 + c as f32).sin() * (y as f32 * 0.15).cos());
        let (cy, cx) = (h as i64 * 15 / 32, w as i64 / 2);
        if (x as i64 - cx).pow(2) + (y as i64 - cy).pow(2) < (h * w) as i64 * 150 / 4096 {
            0.9 - 0.2 * c as f32
        } else {
            v
        }
    });
    let att = [0.45f32, 0.8, 0.9];
    let veil = [0.05f32, 0.15, 0.2];
    let input = Tensor::from_fn(vec![3, h, w], |i| {
        let c = i / (h * w);
        target.data()[i] * att[c] + veil[c]
    });
    (input, target)
}

/// Writes `n` PNG pairs under `<root>/<split>/{input,target}`.
pub fn write_split(root: &Path, split: &str, n: usize, h: usize, w: usize) -> PathBuf {
    let dir = root.join(split);
    std::fs::create_dir_all(dir.join(INPUT_DIR)).unwrap();
    std::fs::create_dir_all(dir.join(TARGET_DIR)).unwrap();
    for i in 0..n {
        let (inp, gt) = synthetic_pair(i as u64, h, w);
        save_image(&dir.join(INPUT_DIR).join(format!("img{i}.png")), &inp).unwrap();
        save_image(&dir.join(TARGET_DIR).join(format!("img{i}.png")), &gt).unwrap();
    }
    dir
}

/// Overrides selecting the tiny network and short, cheap training.
pub fn tiny_overrides(root: &Path, iters: usize) -> Vec<String> {
    [
        "net.base_channels=8",
        "net.n_experts=2",
        "net.d_state=4",
        "net.blocks_per_scale=1",
        "train.batch_size=1",
        "train.patch=16",
    ]
    .iter()
    .map(|s| s.to_string())
    .chain([
        format!("train.total_iters={iters}"),
        format!("data.root={}", toml_str(root)),
    ])
    .collect()
}

pub fn toml_str(p: &Path) -> String {
    format!("\"{}\"", p.display().to_string().replace('\\', "\\\\"))
}

pub fn with_overrides<'a>(args: &mut Vec<String>, ovs: impl IntoIterator<Item = &'a String>) {
    for o in ovs {
        args.push("--override".into());
        args.push(o.clone());
    }
}
