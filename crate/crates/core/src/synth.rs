//! Training-patch synthesis from RGB-D pairs.
//!
//! Each source image gets one scattering coefficient β and one illumination
//! colour A. The transmittance follows from depth, the hazy image from the
//! imaging model, and ω×ω patches on a half-overlapping grid are kept when
//! the hazy patch is textured enough.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::imaging::{synthesize_haze, transmittance_from_depth, ColorMap, DepthMap, Image, ScalarMap};
use crate::io::{self, TensorArchive};
use crate::net::TrainSample;

/// Patches whose grayscale variance does not exceed this are discarded.
pub const DEFAULT_VARIANCE_THRESHOLD: f64 = 0.08;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthesisConfig {
    pub beta_min: f32,
    pub beta_max: f32,
    pub airlight_min: f32,
    pub airlight_max: f32,
    pub patch_size: usize,
    pub variance_threshold: f64,
    /// Upper bound on kept patches per source image.
    pub patches_per_image: Option<usize>,
    pub seed: u64,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        SynthesisConfig {
            beta_min: 0.5,
            beta_max: 1.0,
            airlight_min: 0.45,
            airlight_max: 1.0,
            patch_size: 64,
            variance_threshold: DEFAULT_VARIANCE_THRESHOLD,
            patches_per_image: None,
            seed: 0,
        }
    }
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta_min > 0.0 && self.beta_min <= self.beta_max && self.beta_max.is_finite()) {
            return Err(Error::invalid("need 0 < beta_min <= beta_max"));
        }
        if !(0.0 <= self.airlight_min && self.airlight_min <= self.airlight_max && self.airlight_max <= 1.0) {
            return Err(Error::invalid("need 0 <= airlight_min <= airlight_max <= 1"));
        }
        if self.patch_size < 8 {
            return Err(Error::invalid("patch size must be at least 8"));
        }
        if !(self.variance_threshold >= 0.0) {
            return Err(Error::invalid("variance threshold must be nonnegative"));
        }
        Ok(())
    }
}

/// Population variance of the per-pixel channel mean.
pub fn patch_variance(patch: &Image) -> f64 {
    let gray = patch.channel_mean();
    let n = gray.len() as f64;
    let mean = gray.iter().map(|&v| v as f64).sum::<f64>() / n;
    gray.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n
}

/// Textured enough to be used: strictly above the threshold.
pub fn passes_variance_gate(variance: f64, threshold: f64) -> bool {
    variance > threshold
}

/// Top-left coordinates of a regular grid with the given stride, starting at
/// `offset`, of windows of `size` fitting inside `extent`.
pub fn grid_positions(extent: usize, size: usize, stride: usize, offset: usize) -> Vec<usize> {
    if size > extent {
        return Vec::new();
    }
    let stride = stride.max(1);
    let mut out = Vec::new();
    let mut p = offset.min(extent - size);
    while p + size <= extent {
        out.push(p);
        p += stride;
    }
    out
}

/// One kept patch and where it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchRecord {
    pub sample: TrainSample,
    pub source: usize,
    pub y: usize,
    pub x: usize,
    pub beta: f32,
    pub variance: f64,
}

/// Everything synthesised from one source image.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSamples {
    pub source: usize,
    pub beta: f32,
    pub airlight: [f32; 3],
    pub patches: Vec<PatchRecord>,
    pub rejected: usize,
}

/// Synthesises haze over one clean image and extracts gated patches.
/// Deterministic in `(config.seed, source)`.
pub fn samples_from_scene(clean: &Image, depth: &DepthMap, config: &SynthesisConfig, source: usize) -> Result<SceneSamples> {
    config.validate()?;
    if clean.dims() != depth.dims() {
        return Err(Error::invalid(format!(
            "rgb {:?} and depth {:?} differ in size",
            clean.dims(),
            depth.dims()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(source as u64);
    let beta = rng.gen_range(config.beta_min..=config.beta_max);
    let airlight = [(); 3].map(|_| rng.gen_range(config.airlight_min..=config.airlight_max));
    let (h, w) = clean.dims();
    let t = transmittance_from_depth(depth, beta)?;
    let hazy = synthesize_haze(clean, &t, &ColorMap::filled(h, w, airlight)?)?;

    let size = config.patch_size;
    let stride = (size / 2).max(1);
    let oy = rng.gen_range(0..stride);
    let ox = rng.gen_range(0..stride);
    let mut patches = Vec::new();
    let mut rejected = 0;
    'grid: for y in grid_positions(h, size, stride, oy) {
        for x in grid_positions(w, size, stride, ox) {
            if config.patches_per_image.is_some_and(|cap| patches.len() >= cap) {
                break 'grid;
            }
            let hz = hazy.crop(y, x, size, size)?;
            let variance = patch_variance(&hz);
            if !passes_variance_gate(variance, config.variance_threshold) {
                rejected += 1;
                continue;
            }
            let sample = TrainSample::new(hz, clean.crop(y, x, size, size)?, t.crop(y, x, size, size)?, airlight)?;
            patches.push(PatchRecord {
                sample,
                source,
                y,
                x,
                beta,
                variance,
            });
        }
    }
    Ok(SceneSamples {
        source,
        beta,
        airlight,
        patches,
        rejected,
    })
}

/// Paired RGB and depth files.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    pub entries: Vec<(PathBuf, PathBuf)>,
}

#[derive(Debug, serde::Deserialize)]
struct ManifestRow {
    rgb: PathBuf,
    depth: PathBuf,
}

impl DatasetManifest {
    /// Reads a CSV with header `rgb,depth`; relative paths resolve against the manifest's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| Error::format(path, e.to_string()))?;
        let headers = reader.headers().map_err(|e| Error::format(path, e.to_string()))?;
        if headers.iter().collect::<Vec<_>>() != ["rgb", "depth"] {
            return Err(Error::format(path, "manifest header must be `rgb,depth`"));
        }
        let mut entries = Vec::new();
        for row in reader.deserialize::<ManifestRow>() {
            let row = row.map_err(|e| Error::format(path, e.to_string()))?;
            entries.push((base.join(row.rgb), base.join(row.depth)));
        }
        Ok(DatasetManifest { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
        let fmt = |e: csv::Error| Error::format(path, e.to_string());
        w.write_record(["rgb", "depth"]).map_err(fmt)?;
        for (rgb, depth) in &self.entries {
            w.write_record([rgb.to_string_lossy().as_ref(), depth.to_string_lossy().as_ref()])
                .map_err(fmt)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// A manifest record that could not be used.
#[derive(Debug)]
pub struct RecordError {
    pub source: usize,
    pub rgb: PathBuf,
    pub error: Error,
}

#[derive(Debug, Default)]
pub struct SynthesisOutput {
    pub scenes: Vec<SceneSamples>,
    pub errors: Vec<RecordError>,
}

impl SynthesisOutput {
    pub fn kept(&self) -> usize {
        self.scenes.iter().map(|s| s.patches.len()).sum()
    }

    pub fn rejected(&self) -> usize {
        self.scenes.iter().map(|s| s.rejected).sum()
    }

    pub fn records(&self) -> impl Iterator<Item = &PatchRecord> {
        self.scenes.iter().flat_map(|s| &s.patches)
    }
}

/// Synthesises samples for every manifest entry. Unreadable or mismatched
/// pairs are reported and skipped; output order follows the manifest.
pub fn generate_samples(manifest: &DatasetManifest, config: &SynthesisConfig) -> Result<SynthesisOutput> {
    config.validate()?;
    let results: Vec<(usize, Result<SceneSamples>)> = manifest
        .entries
        .par_iter()
        .enumerate()
        .map(|(i, (rgb, depth))| {
            let run = || -> Result<SceneSamples> {
                let clean = io::load_image(rgb)?;
                let depth = io::load_depth(depth)?;
                samples_from_scene(&clean, &depth, config, i)
            };
            (i, run())
        })
        .collect();
    let mut out = SynthesisOutput::default();
    for (i, r) in results {
        match r {
            Ok(s) => out.scenes.push(s),
            Err(error) => {
                log::warn!("skipping {}: {error}", manifest.entries[i].0.display());
                out.errors.push(RecordError {
                    source: i,
                    rgb: manifest.entries[i].0.clone(),
                    error,
                })
            }
        }
    }
    Ok(out)
}

pub const INDEX_FILE: &str = "index.csv";

fn sample_archive(sample: &TrainSample) -> TensorArchive {
    let w = sample.side();
    let mut a = TensorArchive::new();
    let push = |a: &mut TensorArchive, name: &str, dims: &[usize], data: Vec<f32>| {
        a.push(name, dims, data).expect("fixed sample layout");
    };
    push(&mut a, "hazy", &[w, w, 3], sample.hazy.as_slice().to_vec());
    push(&mut a, "clean", &[w, w, 3], sample.clean.as_slice().to_vec());
    push(&mut a, "t", &[w, w, 1], sample.t.as_slice().to_vec());
    push(&mut a, "airlight", &[3], sample.airlight.to_vec());
    a
}

fn sample_from_archive(a: &TensorArchive) -> Result<TrainSample> {
    let side = a
        .get("t")
        .and_then(|e| e.dims.first().copied())
        .ok_or_else(|| Error::invalid("sample record has no t entry"))? as usize;
    let img = |name| -> Result<Image> { Image::new(side, side, a.expect(name, &[side, side, 3])?.to_vec()) };
    let t = ScalarMap::new(side, side, a.expect("t", &[side, side, 1])?.to_vec())?;
    let al = a.expect("airlight", &[3])?;
    TrainSample::new(img("hazy")?, img("clean")?, t, [al[0], al[1], al[2]])
}

/// Writes one `DHZW` record per sample plus `index.csv`.
pub fn write_dataset<'a>(dir: impl AsRef<Path>, records: impl IntoIterator<Item = &'a PatchRecord>) -> Result<usize> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let index_path = dir.join(INDEX_FILE);
    let mut index = String::from("file,source,y,x,beta,a_r,a_g,a_b,variance\n");
    let mut count = 0;
    for (i, r) in records.into_iter().enumerate() {
        let file = format!("sample_{i:06}.dhzw");
        sample_archive(&r.sample).save(dir.join(&file))?;
        let a = r.sample.airlight;
        index.push_str(&format!(
            "{file},{},{},{},{:.9},{:.9},{:.9},{:.9},{:.9}\n",
            r.source, r.y, r.x, r.beta, a[0], a[1], a[2], r.variance
        ));
        count += 1;
    }
    std::fs::write(&index_path, index).map_err(|e| Error::io(&index_path, e))?;
    Ok(count)
}

/// Loads every sample listed in a dataset directory's index, in index order.
pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Vec<TrainSample>> {
    let dir = dir.as_ref();
    let index_path = dir.join(INDEX_FILE);
    let mut reader = csv::Reader::from_path(&index_path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(&index_path, io),
        other => Error::format(&index_path, format!("{other:?}")),
    })?;
    let files: Vec<String> = reader
        .records()
        .map(|r| {
            r.map_err(|e| Error::format(&index_path, e.to_string()))
                .and_then(|rec| {
                    rec.get(0)
                        .map(str::to_string)
                        .ok_or_else(|| Error::format(&index_path, "empty index row"))
                })
        })
        .collect::<Result<_>>()?;
    files
        .par_iter()
        .map(|f| {
            let path = dir.join(f);
            sample_from_archive(&TensorArchive::load(&path)?).map_err(|e| Error::format(&path, e.to_string()))
        })
        .collect()
}

/// A procedurally generated RGB-D scene: high-contrast textured layers at
/// different depths over a receding background plane. Used for tests,
/// benchmarks and demos in place of captured RGB-D data.
pub fn procedural_scene(height: usize, width: usize, seed: u64) -> Result<(Image, DepthMap)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let color = |rng: &mut ChaCha8Rng, bright: bool| -> [f32; 3] {
        let base = if bright { rng.gen_range(0.75..1.0) } else { rng.gen_range(0.0..0.2) };
        [(); 3].map(|_| (base + rng.gen_range(-0.1f32..0.1)).clamp(0.0, 1.0))
    };
    // Background: checkerboard over a plane receding with image row.
    let cell = rng.gen_range(4..12usize);
    let bg = [color(&mut rng, false), color(&mut rng, true)];
    let near: f32 = rng.gen_range(0.1..0.4);
    let far: f32 = near + rng.gen_range(0.4..1.2);
    let tilt: f32 = rng.gen_range(-0.2..0.2);

    struct Layer {
        y0: f32,
        x0: f32,
        ry: f32,
        rx: f32,
        depth: f32,
        period: usize,
        colors: [[f32; 3]; 2],
        round: bool,
    }
    let layers: Vec<Layer> = (0..rng.gen_range(2..6))
        .map(|_| Layer {
            y0: rng.gen_range(0.0..height as f32),
            x0: rng.gen_range(0.0..width as f32),
            ry: rng.gen_range(0.1..0.35) * height as f32,
            rx: rng.gen_range(0.1..0.35) * width as f32,
            depth: rng.gen_range(0.05..0.6),
            period: rng.gen_range(3..10),
            colors: [color(&mut rng, false), color(&mut rng, true)],
            round: rng.gen_bool(0.5),
        })
        .collect();

    let mut rgb = Vec::with_capacity(height * width * 3);
    let mut depth = Vec::with_capacity(height * width);
    for y in 0..height {
        for x in 0..width {
            let v = y as f32 / height.max(1) as f32;
            let u = x as f32 / width.max(1) as f32;
            let mut d = (far + (near - far) * v + tilt * u).max(0.0);
            let mut c = bg[((y / cell) + (x / cell)) % 2];
            for l in &layers {
                let dy = (y as f32 - l.y0) / l.ry;
                let dx = (x as f32 - l.x0) / l.rx;
                let inside = if l.round { dy * dy + dx * dx <= 1.0 } else { dy.abs() <= 1.0 && dx.abs() <= 1.0 };
                if inside && l.depth < d {
                    d = l.depth;
                    c = l.colors[((y + x) / l.period) % 2];
                }
            }
            rgb.extend_from_slice(&c);
            depth.push(d);
        }
    }
    Ok((Image::new(height, width, rgb)?, DepthMap::new(height, width, depth)?))
}

/// The first `count` gated patches synthesised from procedural scenes of side
/// `scene_side`, taken in scene order (scene seeds 0, 1, 2, ...).
pub fn procedural_samples(count: usize, scene_side: usize, config: &SynthesisConfig) -> Result<Vec<TrainSample>> {
    config.validate()?;
    let mut samples = Vec::with_capacity(count);
    let mut scene = 0u64;
    let mut barren = 0;
    while samples.len() < count {
        let (clean, depth) = procedural_scene(scene_side, scene_side, scene)?;
        let found = samples_from_scene(&clean, &depth, config, scene as usize)?;
        barren = if found.patches.is_empty() { barren + 1 } else { 0 };
        if barren == 100 {
            return Err(Error::invalid("no procedural scene yields patches under this configuration"));
        }
        samples.extend(found.patches.into_iter().map(|p| p.sample));
        scene += 1;
    }
    samples.truncate(count);
    Ok(samples)
}
