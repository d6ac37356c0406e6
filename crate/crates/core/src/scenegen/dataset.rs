//! Dataset generation, the manifest, and image IO.
//!
//! A dataset is a directory: `manifest.json` plus one tensor container per
//! view under `images/`. Containers (float CHW in [0,1]) are the canonical
//! image format; 8-bit PNG import/export exists for eyeballing. Scene
//! attributes are drawn from a seeded generator and the train/test split
//! separates whole (color, shape, accent) compositions, so every test label
//! is a composition never seen in training.

use super::render::{camera_rig, render_ground_truth, DEFAULT_FOCAL, DEFAULT_RADIUS, RESOLUTIONS};
use super::vocab::{scene_texts, TextLabel, COLORS};
use super::{Accent, CameraPose, Primitive, SceneSpec};
use crate::error::{Error, Result};
use crate::numerics::{read_tensor, write_tensor, Tensor};
use crate::par;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One rendered view of a scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewRecord {
    pub azimuth_index: usize,
    /// Elevation in radians.
    pub elevation: f64,
    /// Container path relative to the manifest's directory.
    pub image: String,
}

/// One scene with its labels and views.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub id: usize,
    pub spec: SceneSpec,
    pub split: Split,
    pub coarse_text: String,
    pub full_text: String,
    pub views: Vec<ViewRecord>,
}

impl SceneRecord {
    /// Token-id labels, rebuilt from the spec.
    pub fn label(&self) -> Result<TextLabel> {
        TextLabel::for_scene(&self.spec)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub resolution: usize,
    /// Elevation rings in use (1 or 2).
    pub rings: usize,
    pub radius: f64,
    pub focal: f64,
    pub seed: u64,
    pub scenes: Vec<SceneRecord>,
}

impl DatasetManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Malformed {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        std::fs::write(path, json + "\n").map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<DatasetManifest> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        serde_json::from_str(&text).map_err(|e| Error::Malformed {
            path: path.display().to_string(),
            reason: e.to_string(),
        })
    }

    /// The camera for one of this dataset's views.
    pub fn pose(&self, view: &ViewRecord) -> Result<CameraPose> {
        CameraPose::new(
            view.azimuth_index,
            view.elevation,
            self.radius,
            self.focal,
            self.resolution,
        )
    }

    pub fn train_scenes(&self) -> impl Iterator<Item = &SceneRecord> {
        self.scenes.iter().filter(|s| s.split == Split::Train)
    }

    pub fn test_scenes(&self) -> impl Iterator<Item = &SceneRecord> {
        self.scenes.iter().filter(|s| s.split == Split::Test)
    }
}

/// Scene attributes that define a composition for splitting purposes.
type Composition = (usize, usize, usize); // (color, primitive, accent) indices

/// Picks the held-out compositions: about a fifth of the distinct ones, at
/// least one, always leaving at least one for training. Fails when fewer
/// than two distinct compositions exist.
fn pick_test_compositions(
    all: &[Composition],
    rng: &mut ChaCha12Rng,
) -> Result<BTreeSet<Composition>> {
    let distinct: BTreeSet<Composition> = all.iter().copied().collect();
    if distinct.len() < 2 {
        return Err(Error::InvalidArgument {
            op: "generate_dataset",
            reason: format!(
                "only {} distinct (color, shape, accent) compositions among the sampled scenes; \
                 a disjoint train/test split needs at least 2 — use more scenes or another seed",
                distinct.len()
            ),
        });
    }
    let mut pool: Vec<Composition> = distinct.into_iter().collect();
    pool.shuffle(rng);
    let n_test = ((pool.len() as f64 * 0.2).round() as usize).clamp(1, pool.len() - 1);
    Ok(pool[..n_test].iter().copied().collect())
}

/// Renders a complete dataset into `out_dir`: `n_scenes` seeded random scenes
/// × 30 azimuths × `rings` elevation rings at the given resolution, with
/// labels attached and the manifest written to `out_dir/manifest.json`. The
/// output is a deterministic function of the arguments, byte for byte.
pub fn generate_dataset(
    out_dir: &Path,
    n_scenes: usize,
    seed: u64,
    resolution: usize,
    rings: usize,
) -> Result<DatasetManifest> {
    if n_scenes < 2 {
        return Err(Error::InvalidArgument {
            op: "generate_dataset",
            reason: format!("need at least 2 scenes for a train/test split, got {n_scenes}"),
        });
    }
    if !RESOLUTIONS.contains(&resolution) {
        return Err(Error::InvalidArgument {
            op: "generate_dataset",
            reason: format!("resolution {resolution} not in {RESOLUTIONS:?}"),
        });
    }
    let rig = camera_rig(rings, DEFAULT_RADIUS, DEFAULT_FOCAL, resolution)?;

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut specs = Vec::with_capacity(n_scenes);
    let mut compositions = Vec::with_capacity(n_scenes);
    for _ in 0..n_scenes {
        let color_i = rng.gen_range(0..COLORS.len());
        let primitive = Primitive::ALL[rng.gen_range(0..Primitive::ALL.len())];
        let accent = Accent::ALL[rng.gen_range(0..Accent::ALL.len())];
        let accent_color = if accent == Accent::None {
            COLORS[color_i].1
        } else {
            // Accent must contrast with the base; redraw until it does.
            loop {
                let i = rng.gen_range(0..COLORS.len());
                if i != color_i {
                    break COLORS[i].1;
                }
            }
        };
        specs.push(SceneSpec {
            primitive,
            base_color: COLORS[color_i].1,
            size: rng.gen_range(0.3..0.7),
            accent,
            accent_color,
            density_inside: rng.gen_range(6.0..12.0),
        });
        compositions.push((color_i, primitive as usize, accent as usize));
    }
    let test_set = pick_test_compositions(&compositions, &mut rng)?;

    std::fs::create_dir_all(out_dir.join("images"))
        .map_err(|e| Error::io(out_dir.display().to_string(), e))?;

    // Every (scene, view) renders independently; writes stay sequential.
    let jobs: Vec<(usize, CameraPose, String)> = (0..n_scenes)
        .flat_map(|si| {
            rig.iter().enumerate().map(move |(pi, pose)| {
                let (ring, az) = (pi / 30, pi % 30);
                (si, *pose, format!("images/scene{si:04}_r{ring}_a{az:02}.tensor"))
            })
        })
        .collect();
    let rendered = par::map_slice(&jobs, |(si, pose, _)| {
        render_ground_truth(&specs[*si], pose, resolution)
    });
    for ((_, _, rel), img) in jobs.iter().zip(rendered) {
        write_tensor(out_dir.join(rel), &img?.cast::<f32>())?;
    }

    let mut scenes = Vec::with_capacity(n_scenes);
    for (si, spec) in specs.into_iter().enumerate() {
        let (coarse_text, full_text) = scene_texts(&spec)?;
        let views = rig
            .iter()
            .enumerate()
            .map(|(pi, pose)| ViewRecord {
                azimuth_index: pose.azimuth_index,
                elevation: pose.elevation,
                image: jobs[si * rig.len() + pi].2.clone(),
            })
            .collect();
        scenes.push(SceneRecord {
            id: si,
            spec,
            split: if test_set.contains(&compositions[si]) {
                Split::Test
            } else {
                Split::Train
            },
            coarse_text,
            full_text,
            views,
        });
    }
    let manifest = DatasetManifest {
        resolution,
        rings,
        radius: DEFAULT_RADIUS,
        focal: DEFAULT_FOCAL,
        seed,
        scenes,
    };
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

fn expect_rgb(img: &Tensor<f32>, op: &'static str) -> Result<(usize, usize)> {
    match img.shape() {
        [3, h, w] => Ok((*h, *w)),
        other => Err(Error::InvalidShape {
            op,
            shape: other.to_vec(),
            reason: "expected a [3, height, width] image".into(),
        }),
    }
}

fn expect_unit_range(img: &Tensor<f32>, op: &'static str) -> Result<()> {
    if img.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidArgument {
            op,
            reason: "image values must lie in [0,1]".into(),
        });
    }
    Ok(())
}

/// Writes an RGB image ([3, H, W], values in [0,1]) as a tensor container.
pub fn save_image(path: &Path, img: &Tensor<f32>) -> Result<()> {
    expect_rgb(img, "save_image")?;
    expect_unit_range(img, "save_image")?;
    write_tensor(path, img)
}

/// Reads an RGB image container back, enforcing shape and range.
pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    let img = read_tensor::<f32>(path)?;
    expect_rgb(&img, "load_image")?;
    expect_unit_range(&img, "load_image")?;
    Ok(img)
}

/// 8-bit PNG export of an RGB image tensor (round-to-nearest quantization).
pub fn save_png(path: &Path, img: &Tensor<f32>) -> Result<()> {
    let (h, w) = expect_rgb(img, "save_png")?;
    expect_unit_range(img, "save_png")?;
    let d = img.data();
    let mut bytes = Vec::with_capacity(3 * h * w);
    for px in 0..h * w {
        for ch in 0..3 {
            bytes.push((d[ch * h * w + px] * 255.0).round() as u8);
        }
    }
    image::save_buffer(
        path,
        &bytes,
        w as u32,
        h as u32,
        image::ExtendedColorType::Rgb8,
    )
    .map_err(|e| Error::Malformed {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

/// Loads an 8-bit PNG as a [3, H, W] float image in [0,1].
pub fn load_png(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::Malformed {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.into_raw();
    let mut out = Tensor::zeros(vec![3, h, w]);
    for px in 0..h * w {
        for ch in 0..3 {
            out.data_mut()[ch * h * w + px] = raw[px * 3 + ch] as f32 / 255.0;
        }
    }
    Ok(out)
}
