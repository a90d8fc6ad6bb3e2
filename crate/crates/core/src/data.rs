//! On-disk synthetic datasets and precomputed diffusion conditions.
//!
//! A dataset root holds `manifest.txt` plus one directory per scene with a
//! pose file and `images/view_NNN.{png,pfm}`. Training reads the PFM files.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::camera::{read_pose_file, write_pose_file};
use crate::diffusion::{Condition, DiffusionExample};
use crate::error::{Error, Result};
use crate::io::{read_pfm, write_pfm, write_png, Config};
use crate::model::{Reconstructor, View};
use crate::pipeline::{sample_training, SceneViews, TargetStrategy};
use crate::renderer::RenderConfig;
use crate::scene::{generate_scene, orbit_cameras, render_ground_truth};
use crate::tensor::{read_checkpoint, write_checkpoint, Tensor};

pub const MANIFEST: &str = "manifest.txt";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid("split", format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub seed: u64,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub test_scenes: usize,
    pub views: usize,
    pub size: usize,
    /// Samples per ray for the ground-truth renders.
    pub gt_samples: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            seed: 0,
            train_scenes: 16,
            val_scenes: 2,
            test_scenes: 2,
            views: 24,
            size: 32,
            gt_samples: 64,
        }
    }
}

impl DatasetConfig {
    pub fn from_config(cfg: &mut Config) -> Result<Self> {
        let d = DatasetConfig::default();
        let out = DatasetConfig {
            seed: cfg.resolve("seed", d.seed)?,
            train_scenes: cfg.resolve("train_scenes", d.train_scenes)?,
            val_scenes: cfg.resolve("val_scenes", d.val_scenes)?,
            test_scenes: cfg.resolve("test_scenes", d.test_scenes)?,
            views: cfg.resolve("views", d.views)?,
            size: cfg.resolve("size", d.size)?,
            gt_samples: cfg.resolve("gt_samples", d.gt_samples)?,
        };
        if out.views == 0 || out.size == 0 || out.gt_samples == 0 {
            return Err(Error::invalid("config", "views, size and gt_samples must be positive"));
        }
        if out.train_scenes == 0 {
            return Err(Error::invalid("config", "need at least one training scene"));
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: u64,
    /// Paths are relative to the dataset root.
    pub pose_file: PathBuf,
    pub image_dir: PathBuf,
    pub view_count: usize,
    pub split: Split,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    /// One scene per line: `id pose_file image_dir view_count split`.
    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|e| {
                format!(
                    "{} {} {} {} {}\n",
                    e.id,
                    e.pose_file.display(),
                    e.image_dir.display(),
                    e.view_count,
                    e.split
                )
            })
            .collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |n: usize, reason: &str| Error::Parse {
            what: MANIFEST.into(),
            reason: format!("line {}: {reason}", n + 1),
        };
        let mut entries: Vec<ManifestEntry> = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 5 {
                return Err(bad(n, "expected `id pose_file image_dir view_count split`"));
            }
            let id = f[0].parse().map_err(|_| bad(n, "bad scene id"))?;
            if entries.iter().any(|e| e.id == id) {
                return Err(bad(n, "scene listed twice"));
            }
            entries.push(ManifestEntry {
                id,
                pose_file: f[1].into(),
                image_dir: f[2].into(),
                view_count: f[3].parse().map_err(|_| bad(n, "bad view count"))?,
                split: f[4].parse().map_err(|_| bad(n, "bad split"))?,
            });
        }
        Ok(DatasetManifest { entries })
    }

    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST);
        let manifest = Self::parse(&std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?)?;
        for e in &manifest.entries {
            let mut files = vec![root.join(&e.pose_file)];
            files.extend((0..e.view_count).map(|k| root.join(&e.image_dir).join(view_file(k, "pfm"))));
            if let Some(missing) = files.iter().find(|f| !f.is_file()) {
                return Err(Error::invalid("dataset", format!("missing file {}", missing.display())));
            }
        }
        Ok(manifest)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }
}

fn view_file(k: usize, ext: &str) -> String {
    format!("view_{k:03}.{ext}")
}

/// Scene seeds for a dataset seed, in manifest order.
pub fn scene_seeds(cfg: &DatasetConfig) -> Vec<(u64, Split)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let splits = [
        (Split::Train, cfg.train_scenes),
        (Split::Val, cfg.val_scenes),
        (Split::Test, cfg.test_scenes),
    ];
    let mut out: Vec<(u64, Split)> = Vec::new();
    for (split, count) in splits {
        while out.iter().filter(|(_, s)| *s == split).count() < count {
            // Ids stay readable in file names.
            let id = rng.gen_range(0..1_000_000u64);
            if !out.iter().any(|(s, _)| *s == id) {
                out.push((id, split));
            }
        }
    }
    out
}

/// Renders every scene's views and writes the dataset tree under `root`.
pub fn generate_dataset(root: &Path, cfg: &DatasetConfig) -> Result<DatasetManifest> {
    let gt = RenderConfig {
        n_samples: cfg.gt_samples,
        ..RenderConfig::default()
    };
    let mut manifest = DatasetManifest::default();
    for (id, split) in scene_seeds(cfg) {
        let dir = PathBuf::from(format!("scene_{id:06}"));
        let image_dir = dir.join("images");
        let abs_images = root.join(&image_dir);
        std::fs::create_dir_all(&abs_images).map_err(|e| Error::io(&abs_images, e))?;
        let scene = generate_scene(id);
        let poses = orbit_cameras(id, cfg.views, cfg.size)?;
        let pose_file = dir.join("poses.txt");
        write_pose_file(&root.join(&pose_file), &poses)?;
        for (k, pose) in poses.iter().enumerate() {
            let img = render_ground_truth(&scene, pose, &gt)?;
            write_png(&abs_images.join(view_file(k, "png")), &img)?;
            write_pfm(&abs_images.join(view_file(k, "pfm")), &img)?;
        }
        manifest.entries.push(ManifestEntry {
            id,
            pose_file,
            image_dir,
            view_count: cfg.views,
            split,
        });
    }
    let path = root.join(MANIFEST);
    std::fs::write(&path, manifest.to_text()).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn load_scene(root: &Path, entry: &ManifestEntry) -> Result<SceneViews> {
    let poses = read_pose_file(&root.join(&entry.pose_file))?;
    if poses.len() != entry.view_count {
        return Err(Error::invalid(
            "dataset",
            format!("scene {} lists {} views but has {} poses", entry.id, entry.view_count, poses.len()),
        ));
    }
    let views = poses
        .into_iter()
        .enumerate()
        .map(|(k, pose)| {
            let image = read_pfm(&root.join(&entry.image_dir).join(view_file(k, "pfm")))?;
            if image.shape() != [3, pose.height(), pose.width()] {
                return Err(Error::shape("dataset", &[image.shape()]));
            }
            Ok(View { image, pose })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SceneViews { id: entry.id, views })
}

pub fn load_split(root: &Path, manifest: &DatasetManifest, split: Split) -> Result<Vec<SceneViews>> {
    manifest.split(split).map(|e| load_scene(root, e)).collect()
}

/// One conditioning record per view of every scene: that view is the
/// target, 1–3 other views are drawn as inputs, and the feature map is
/// rendered from them at the target pose.
pub fn precompute_conditions(
    model: &Reconstructor,
    scenes: &[SceneViews],
    seed: u64,
) -> Result<Vec<DiffusionExample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for scene in scenes {
        for target in 0..scene.views.len() {
            let others: Vec<usize> = (0..scene.views.len()).filter(|&k| k != target).collect();
            let pool = if others.is_empty() { vec![target] } else { others };
            let sample = sample_training(&mut rng, std::slice::from_ref(scene), Some(&pool), TargetStrategy::Uniform)?;
            let pose = &scene.views[target].pose;
            let (_, feature) = model.predict(&sample.inputs, pose)?;
            out.push(DiffusionExample {
                target: scene.views[target].image.clone(),
                cond: Condition {
                    feature,
                    image: sample.inputs[0].image.clone(),
                },
            });
        }
    }
    Ok(out)
}

pub fn save_conditions(path: &Path, records: &[DiffusionExample]) -> Result<()> {
    let mut tensors = Vec::with_capacity(3 * records.len());
    for (i, r) in records.iter().enumerate() {
        tensors.push((format!("{i:06}.target"), r.target.clone()));
        tensors.push((format!("{i:06}.feature"), r.cond.feature.clone()));
        tensors.push((format!("{i:06}.input"), r.cond.image.clone()));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(BufWriter::new(file), &tensors)
}

pub fn load_conditions(path: &Path) -> Result<Vec<DiffusionExample>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let tensors = read_checkpoint(BufReader::new(file))?;
    if tensors.len() % 3 != 0 {
        return Err(Error::Checkpoint("condition records come in triples".into()));
    }
    tensors
        .chunks(3)
        .enumerate()
        .map(|(i, c)| {
            let expect = [
                format!("{i:06}.target"),
                format!("{i:06}.feature"),
                format!("{i:06}.input"),
            ];
            if c.iter().zip(&expect).any(|((name, _), e)| name != e) {
                return Err(Error::Checkpoint(format!("record {i} is malformed")));
            }
            Ok(DiffusionExample {
                target: c[0].1.clone(),
                cond: Condition {
                    feature: c[1].1.clone(),
                    image: c[2].1.clone(),
                },
            })
        })
        .collect()
}

/// Writes `img` as `stem.png` and `stem.pfm` in `dir`.
pub fn save_render(dir: &Path, stem: &str, img: &Tensor) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_png(&dir.join(format!("{stem}.png")), img)?;
    write_pfm(&dir.join(format!("{stem}.pfm")), img)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> DatasetConfig {
        DatasetConfig {
            seed: 5,
            train_scenes: 2,
            val_scenes: 1,
            test_scenes: 1,
            views: 3,
            size: 8,
            gt_samples: 8,
        }
    }

    #[test]
    fn manifest_round_trip_and_disjoint_splits() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_dataset(dir.path(), &tiny()).unwrap();
        assert_eq!(m.entries.len(), 4);
        let back = DatasetManifest::load(dir.path()).unwrap();
        assert_eq!(back, m);
        let mut ids: Vec<u64> = m.entries.iter().map(|e| e.id).collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 4);
        let train = load_split(dir.path(), &m, Split::Train).unwrap();
        assert_eq!(train.len(), 2);
        assert_eq!(train[0].views.len(), 3);
        assert!(DatasetManifest::parse("1 a b 3 nope").is_err());
        assert!(DatasetManifest::parse("1 a b 3 train\n1 c d 3 val").is_err());
    }

    #[test]
    fn missing_files_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_dataset(dir.path(), &tiny()).unwrap();
        let e = &m.entries[0];
        std::fs::remove_file(dir.path().join(&e.image_dir).join(view_file(1, "pfm"))).unwrap();
        assert!(DatasetManifest::load(dir.path()).is_err());
    }
}
