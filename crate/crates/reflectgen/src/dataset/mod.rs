//! Synthetic dataset: tuple type, on-disk layout, manifests, and splits.
//!
//! Layout under a dataset root:
//! `{composite,fg_mask,refl_mask,target}/<tuple_id>.png` plus
//! `manifest.json`. Images are 8-bit PNG; every in-memory tuple is already
//! snapped to 8-bit levels, so disk round-trips are exact.

mod scene;

pub use scene::{generate_scene, sample_scene_spec, ObjectParams, ObjectShape, SceneSpec, SurfaceKind};

use std::path::Path;

use rand::{seq::SliceRandom, Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{encode_regression, RotatedBox};
use crate::img::{load_mask_png, load_rgb_png, save_mask_png, save_rgb_png, ImageBuf, Mask};

pub const MANIFEST_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReflectionType {
    Vertical,
    Others,
}

impl ReflectionType {
    pub fn as_str(self) -> &'static str {
        match self {
            ReflectionType::Vertical => "vertical",
            ReflectionType::Others => "others",
        }
    }

    /// Class index used by logits and labels: vertical = 0, others = 1.
    pub fn index(self) -> usize {
        match self {
            ReflectionType::Vertical => 0,
            ReflectionType::Others => 1,
        }
    }
}

impl std::fmt::Display for ReflectionType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One training or evaluation sample. `composite` is the reflection-free
/// image; `target` adds the ground-truth reflection inside `refl_mask`.
#[derive(Debug, Clone, PartialEq)]
pub struct DataTuple {
    pub composite: ImageBuf,
    pub fg_mask: Mask,
    pub refl_mask: Mask,
    pub target: ImageBuf,
    pub box_o: RotatedBox,
    pub box_r: RotatedBox,
    pub type_label: ReflectionType,
}

/// Re-checks every cross-field invariant. Run after generation and again
/// after loading from disk.
pub fn validate_tuple(t: &DataTuple) -> Result<()> {
    if !t.composite.same_shape(&t.target) {
        return Err(Error::ShapeMismatch("composite and target differ in shape".into()));
    }
    let (w, h) = (t.composite.width(), t.composite.height());
    if t.fg_mask.width() != w || t.fg_mask.height() != h || !t.fg_mask.same_shape(&t.refl_mask) {
        return Err(Error::ShapeMismatch("masks do not match the image shape".into()));
    }
    if t.fg_mask.intersects(&t.refl_mask) {
        return Err(Error::ShapeMismatch("foreground and reflection masks overlap".into()));
    }
    for y in 0..h {
        for x in 0..w {
            if !t.refl_mask.get(x, y) && t.composite.max_abs_diff_at(&t.target, x, y) != 0.0 {
                return Err(Error::ShapeMismatch(format!(
                    "composite and target differ at ({x},{y}) outside the reflection mask"
                )));
            }
        }
    }
    t.box_o.validate()?;
    t.box_r.validate()?;
    let grown = |b: &RotatedBox| RotatedBox { w: b.w + 1e-6, h: b.h + 1e-6, ..*b };
    let (go, gr) = (grown(&t.box_o), grown(&t.box_r));
    for (x, y) in t.fg_mask.foreground() {
        if !go.contains(x as f64 + 0.5, y as f64 + 0.5) {
            return Err(Error::ShapeMismatch(format!(
                "object box does not enclose foreground pixel ({x},{y})"
            )));
        }
    }
    for (x, y) in t.refl_mask.foreground() {
        if !gr.contains(x as f64 + 0.5, y as f64 + 0.5) {
            return Err(Error::ShapeMismatch(format!(
                "reflection box does not enclose reflection pixel ({x},{y})"
            )));
        }
    }
    let coeffs = encode_regression(&t.box_o, &t.box_r)?;
    if !coeffs.is_finite() {
        return Err(Error::Numeric("regression targets are not finite".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub tuple_id: String,
    pub composite: String,
    pub fg_mask: String,
    pub refl_mask: String,
    pub target: String,
    pub box_o: RotatedBox,
    pub box_r: RotatedBox,
    pub type_label: ReflectionType,
    pub rng_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.format_version != MANIFEST_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "manifest format_version {} (supported: {MANIFEST_FORMAT_VERSION})",
                self.format_version
            )));
        }
        let mut ids: Vec<&str> = self.entries.iter().map(|e| e.tuple_id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|p| p[0] == p[1]) {
            return Err(Error::Config("manifest holds duplicate tuple_ids".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let manifest: DatasetManifest = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        manifest.validate()?;
        Ok(manifest)
    }
}

/// Writes the four rasters of one tuple under `root` and returns its entry.
pub fn save_tuple(root: &Path, tuple_id: &str, t: &DataTuple, rng_seed: u64) -> Result<ManifestEntry> {
    let rel = |dir: &str| format!("{dir}/{tuple_id}.png");
    for dir in ["composite", "fg_mask", "refl_mask", "target"] {
        std::fs::create_dir_all(root.join(dir))?;
    }
    save_rgb_png(&t.composite, &root.join(rel("composite")))?;
    save_mask_png(&t.fg_mask, &root.join(rel("fg_mask")))?;
    save_mask_png(&t.refl_mask, &root.join(rel("refl_mask")))?;
    save_rgb_png(&t.target, &root.join(rel("target")))?;
    Ok(ManifestEntry {
        tuple_id: tuple_id.to_string(),
        composite: rel("composite"),
        fg_mask: rel("fg_mask"),
        refl_mask: rel("refl_mask"),
        target: rel("target"),
        box_o: t.box_o,
        box_r: t.box_r,
        type_label: t.type_label,
        rng_seed,
    })
}

/// Loads one tuple and re-validates every invariant; violations surface as
/// corrupt-data errors naming the tuple.
pub fn load_tuple(root: &Path, entry: &ManifestEntry) -> Result<DataTuple> {
    let tuple = DataTuple {
        composite: load_rgb_png(&root.join(&entry.composite))?,
        fg_mask: load_mask_png(&root.join(&entry.fg_mask))?,
        refl_mask: load_mask_png(&root.join(&entry.refl_mask))?,
        target: load_rgb_png(&root.join(&entry.target))?,
        box_o: entry.box_o,
        box_r: entry.box_r,
        type_label: entry.type_label,
    };
    validate_tuple(&tuple).map_err(|e| Error::CorruptData {
        tuple_id: entry.tuple_id.clone(),
        reason: e.to_string(),
    })?;
    Ok(tuple)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleOptions {
    pub n: usize,
    /// Fraction of tuples labeled "vertical"; the rest are "others".
    pub type_ratio: f64,
    pub seed: u64,
    pub canvas_h: usize,
    pub canvas_w: usize,
}

impl Default for SampleOptions {
    fn default() -> Self {
        SampleOptions { n: 100, type_ratio: 0.9, seed: 0, canvas_h: 64, canvas_w: 64 }
    }
}

/// Generates `n` tuples under `root` and writes `root/manifest.json`.
/// Deterministic for fixed options: each tuple derives a child seed from the
/// master stream, and degenerate draws retry deterministically.
pub fn sample_dataset(root: &Path, opts: &SampleOptions) -> Result<DatasetManifest> {
    if opts.n == 0 {
        return Err(Error::Config("dataset size must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&opts.type_ratio) {
        return Err(Error::Config(format!("type_ratio {} not in [0, 1]", opts.type_ratio)));
    }
    for dir in ["composite", "fg_mask", "refl_mask", "target"] {
        std::fs::create_dir_all(root.join(dir))?;
    }
    let mut master = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut entries = Vec::with_capacity(opts.n);
    for i in 0..opts.n {
        let ty = if master.random_bool(opts.type_ratio) {
            ReflectionType::Vertical
        } else {
            ReflectionType::Others
        };
        let mut child_seed = master.next_u64();
        let mut result = None;
        for _ in 0..64 {
            let mut crng = ChaCha8Rng::seed_from_u64(child_seed);
            let spec = sample_scene_spec(&mut crng, opts.canvas_h, opts.canvas_w, ty);
            match generate_scene(&spec) {
                Ok(tuple) => {
                    result = Some((tuple, child_seed));
                    break;
                }
                Err(Error::DegenerateScene(_)) => child_seed = crng.next_u64(),
                Err(e) => return Err(e),
            }
        }
        let (tuple, used_seed) = result.ok_or_else(|| {
            Error::DegenerateScene(format!("no viable scene after 64 draws for tuple {i}"))
        })?;
        entries.push(save_tuple(root, &format!("{i:06}"), &tuple, used_seed)?);
    }
    let manifest =
        DatasetManifest { format_version: MANIFEST_FORMAT_VERSION, split: None, entries };
    manifest.save(&root.join("manifest.json"))?;
    Ok(manifest)
}

/// Deterministic disjoint split; entry order within each side follows the
/// input manifest.
pub fn split_dataset(
    manifest: &DatasetManifest,
    test_fraction: f64,
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Split(format!("test_fraction {test_fraction} not in (0, 1)")));
    }
    let n = manifest.entries.len();
    let n_test = (n as f64 * test_fraction).round() as usize;
    if n_test == 0 || n_test >= n {
        return Err(Error::Split(format!(
            "test_fraction {test_fraction} leaves an empty split for {n} tuples"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut is_test = vec![false; n];
    for &i in order.iter().take(n_test) {
        is_test[i] = true;
    }
    let side = |want_test: bool, split| DatasetManifest {
        format_version: manifest.format_version,
        split: Some(split),
        entries: manifest
            .entries
            .iter()
            .enumerate()
            .filter(|(i, _)| is_test[*i] == want_test)
            .map(|(_, e)| e.clone())
            .collect(),
    };
    Ok((side(false, Split::Train), side(true, Split::Test)))
}
