//! Persistence: PNG images, the shape-tagged binary array container used for
//! PSF bases and training checkpoints, loss CSVs, sidecar JSON, and digests.

use std::collections::HashMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::{Array1, Array2, Array3, ArrayD, IxDyn};
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::forward::FrameStack;
use crate::nets::{BlurModule, GridDeformer, ImageGenerator};
use crate::optics::{PsfBasis, TurbulenceParams};
use crate::trainer::{AdamGroup, LossRecord, RestorationConfig, RestorationState};
use crate::warp::{resample, uniform_grid};

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("image error: {0}")]
    Image(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

// ---------------------------------------------------------------------------
// PNG images

/// Reads an 8-bit RGB PNG into a (h, w, 3) array scaled to [0,1].
pub fn read_png(path: &Path) -> Result<Array3<f64>, IoError> {
    let img = image::open(path).map_err(|e| IoError::Image(format!("{}: {e}", path.display())))?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    let raw = rgb.into_raw();
    Ok(Array3::from_shape_fn((h as usize, w as usize, 3), |(i, j, c)| {
        raw[(i * w as usize + j) * 3 + c] as f64 / 255.0
    }))
}

/// Writes a [0,1] (h, w, 3) array as an 8-bit RGB PNG.
pub fn write_png(path: &Path, img: &Array3<f64>) -> Result<(), IoError> {
    let (h, w, c) = img.dim();
    if c != 3 {
        return Err(IoError::Format(format!("expected 3 channels, got {c}")));
    }
    let mut raw = Vec::with_capacity(h * w * 3);
    for i in 0..h {
        for j in 0..w {
            for ch in 0..3 {
                raw.push((img[(i, j, ch)].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    let buf = image::RgbImage::from_raw(w as u32, h as u32, raw)
        .ok_or_else(|| IoError::Format("pixel buffer size mismatch".into()))?;
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| IoError::Image(format!("{}: {e}", path.display())))
}

/// Bilinear resize to (m, n) in floating point.
pub fn resize_image(img: &Array3<f64>, m: usize, n: usize) -> Array3<f64> {
    if img.dim().0 == m && img.dim().1 == n {
        return img.clone();
    }
    let grid = uniform_grid::<f64>(m, n).expect("target size >= 2");
    resample(img, &grid).expect("matching channel count")
}

// ---------------------------------------------------------------------------
// Binary array container

/// One named, shape-tagged f32 array inside a container file.
#[derive(Debug, Clone, PartialEq)]
pub struct ContainerEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl ContainerEntry {
    pub fn from_array2(name: &str, a: &Array2<f32>) -> Self {
        Self {
            name: name.into(),
            shape: vec![a.nrows(), a.ncols()],
            data: a.iter().copied().collect(),
        }
    }

    pub fn to_array2(&self) -> Result<Array2<f32>, IoError> {
        if self.shape.len() != 2 {
            return Err(IoError::Format(format!(
                "entry {} has {} dims, expected 2",
                self.name,
                self.shape.len()
            )));
        }
        Array2::from_shape_vec((self.shape[0], self.shape[1]), self.data.clone())
            .map_err(|e| IoError::Format(format!("entry {}: {e}", self.name)))
    }

    pub fn to_dyn_f64(&self) -> Result<ArrayD<f64>, IoError> {
        ArrayD::from_shape_vec(IxDyn(&self.shape), self.data.iter().map(|&v| v as f64).collect())
            .map_err(|e| IoError::Format(format!("entry {}: {e}", self.name)))
    }
}

fn push_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], IoError> {
        if self.pos + n > self.buf.len() {
            return Err(IoError::Format("truncated container file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, IoError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, IoError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, IoError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| IoError::Format("invalid UTF-8 in container".into()))
    }
}

/// Writes a container file: a version header string, a JSON metadata blob,
/// and named little-endian f32 arrays tagged with their shapes.
pub fn write_container(
    path: &Path,
    header: &str,
    json: &str,
    entries: &[ContainerEntry],
) -> Result<(), IoError> {
    let mut buf = Vec::new();
    push_str(&mut buf, header);
    push_str(&mut buf, json);
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        push_str(&mut buf, &e.name);
        buf.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
        let mut count = 1usize;
        for &d in &e.shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
            count *= d;
        }
        if count != e.data.len() {
            return Err(IoError::Format(format!(
                "entry {} shape {:?} does not match {} values",
                e.name,
                e.shape,
                e.data.len()
            )));
        }
        for v in &e.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    atomic_write(path, &buf)
}

/// Reads a container file back; validates the header when one is expected.
pub fn read_container(
    path: &Path,
    expect_header: Option<&str>,
) -> Result<(String, String, Vec<ContainerEntry>), IoError> {
    let buf = fs::read(path)?;
    let mut cur = Cursor { buf: &buf, pos: 0 };
    let header = cur.string()?;
    if let Some(want) = expect_header {
        if header != want {
            return Err(IoError::Format(format!(
                "container header {header:?} does not match expected {want:?}"
            )));
        }
    }
    let json = cur.string()?;
    let n_entries = cur.u32()? as usize;
    let mut entries = Vec::with_capacity(n_entries);
    for _ in 0..n_entries {
        let name = cur.string()?;
        let ndim = cur.u32()? as usize;
        if ndim > 8 {
            return Err(IoError::Format(format!("entry {name} has {ndim} dims")));
        }
        let mut shape = Vec::with_capacity(ndim);
        let mut count = 1usize;
        for _ in 0..ndim {
            let d = cur.u64()? as usize;
            count = count.saturating_mul(d);
            shape.push(d);
        }
        let bytes = cur.take(count.checked_mul(4).ok_or_else(|| {
            IoError::Format(format!("entry {name} is too large"))
        })?)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.push(ContainerEntry { name, shape, data });
    }
    if cur.pos != buf.len() {
        return Err(IoError::Format("trailing bytes after container entries".into()));
    }
    Ok((header, json, entries))
}

// ---------------------------------------------------------------------------
// Atomic writes and digests

/// Writes bytes to a temp file in the target directory, then renames.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Serializes to pretty JSON and writes atomically.
pub fn atomic_write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    atomic_write(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

/// Hex SHA-256 of a file's contents.
pub fn sha256_file(path: &Path) -> Result<String, IoError> {
    let mut hasher = Sha256::new();
    hasher.update(fs::read(path)?);
    Ok(hex_string(&hasher.finalize()))
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Hex SHA-256 over the names and bytes of a directory's PNG files in
/// lexical order; identifies an input stack for the run manifest.
pub fn dir_digest(dir: &Path) -> Result<String, IoError> {
    let mut hasher = Sha256::new();
    for path in png_paths(dir)? {
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        hasher.update(name.as_bytes());
        hasher.update(fs::read(&path)?);
    }
    Ok(hex_string(&hasher.finalize()))
}

fn png_paths(dir: &Path) -> Result<Vec<PathBuf>, IoError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    Ok(paths)
}

// ---------------------------------------------------------------------------
// PSF basis persistence

const BASIS_HEADER: &str = "nert-basis-v1";

/// JSON sidecar stored next to a persisted basis.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BasisSidecar {
    pub params: TurbulenceParams,
    pub n_modes: usize,
    pub pupil_res: usize,
    pub n_samples: usize,
    pub seed: u64,
    pub k_prime: usize,
    pub variance_captured: f64,
    pub warnings: Vec<String>,
    pub sha256: String,
}

fn sidecar_path(bin_path: &Path) -> PathBuf {
    bin_path.with_extension("json")
}

/// Persists a basis as a container file plus a JSON sidecar whose hash
/// pins the binary contents.
pub fn save_basis(bin_path: &Path, basis: &PsfBasis) -> Result<(), IoError> {
    let p = basis.kernel_size();
    let kp = basis.k_prime();
    let entries = vec![
        ContainerEntry {
            name: "mean_psf".into(),
            shape: vec![p, p],
            data: basis.mean_psf.iter().map(|&v| v as f32).collect(),
        },
        ContainerEntry {
            name: "components".into(),
            shape: vec![kp, p, p],
            data: basis.components.iter().map(|&v| v as f32).collect(),
        },
        ContainerEntry {
            name: "coeff_w".into(),
            shape: vec![basis.coeff_w.nrows(), basis.coeff_w.ncols()],
            data: basis.coeff_w.iter().map(|&v| v as f32).collect(),
        },
        ContainerEntry {
            name: "coeff_b".into(),
            shape: vec![basis.coeff_b.len()],
            data: basis.coeff_b.iter().map(|&v| v as f32).collect(),
        },
        ContainerEntry {
            name: "singular_values".into(),
            shape: vec![basis.singular_values.len()],
            data: basis.singular_values.iter().map(|&v| v as f32).collect(),
        },
    ];
    write_container(bin_path, BASIS_HEADER, "{}", &entries)?;
    let sidecar = BasisSidecar {
        params: basis.params,
        n_modes: basis.n_modes,
        pupil_res: basis.pupil_res,
        n_samples: basis.n_samples,
        seed: basis.seed,
        k_prime: kp,
        variance_captured: basis.variance_captured,
        warnings: basis.warnings.clone(),
        sha256: sha256_file(bin_path)?,
    };
    atomic_write_json(&sidecar_path(bin_path), &sidecar)
}

/// Loads a persisted basis, validating the sidecar hash before reuse.
pub fn load_basis(bin_path: &Path) -> Result<PsfBasis, IoError> {
    let sidecar: BasisSidecar = read_json(&sidecar_path(bin_path))?;
    let actual = sha256_file(bin_path)?;
    if actual != sidecar.sha256 {
        return Err(IoError::Format(format!(
            "basis file hash {actual} does not match sidecar {}",
            sidecar.sha256
        )));
    }
    let (_, _, entries) = read_container(bin_path, Some(BASIS_HEADER))?;
    let map: HashMap<String, ContainerEntry> =
        entries.into_iter().map(|e| (e.name.clone(), e)).collect();
    let get = |name: &str| {
        map.get(name)
            .ok_or_else(|| IoError::Format(format!("basis container is missing {name}")))
    };
    let mean = get("mean_psf")?.to_dyn_f64()?;
    let comps = get("components")?.to_dyn_f64()?;
    let w = get("coeff_w")?.to_dyn_f64()?;
    let b = get("coeff_b")?.to_dyn_f64()?;
    let sv = get("singular_values")?.to_dyn_f64()?;
    let dim_err = |e: ndarray::ShapeError| IoError::Format(e.to_string());
    Ok(PsfBasis {
        params: sidecar.params,
        n_modes: sidecar.n_modes,
        pupil_res: sidecar.pupil_res,
        mean_psf: mean.into_dimensionality().map_err(dim_err)?,
        components: comps.into_dimensionality().map_err(dim_err)?,
        coeff_w: w.into_dimensionality().map_err(dim_err)?,
        coeff_b: Array1::from_vec(b.iter().copied().collect()),
        singular_values: sv.iter().copied().collect(),
        variance_captured: sidecar.variance_captured,
        n_samples: sidecar.n_samples,
        seed: sidecar.seed,
        warnings: sidecar.warnings,
    })
}

/// Loads a cached basis only if it is intact and was built with exactly the
/// requested settings; any mismatch falls back to rebuilding.
pub fn load_basis_if_matching(
    bin_path: &Path,
    params: TurbulenceParams,
    n_modes: usize,
    n_samples: usize,
    seed: u64,
) -> Option<PsfBasis> {
    if !bin_path.exists() {
        return None;
    }
    let basis = load_basis(bin_path).ok()?;
    (basis.params == params
        && basis.n_modes == n_modes
        && basis.n_samples == n_samples
        && basis.seed == seed)
        .then_some(basis)
}

// ---------------------------------------------------------------------------
// Simulated stack directories

/// Parameters recorded next to a simulated stack.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SimulationSidecar {
    pub d_over_r0: f64,
    pub corr: f64,
    pub kernel_size: usize,
    pub n_frames: usize,
    pub control_spacing: usize,
    pub seed: u64,
}

impl SimulationSidecar {
    pub fn turbulence(&self) -> TurbulenceParams {
        TurbulenceParams {
            d_over_r0: self.d_over_r0,
            corr: self.corr,
            kernel_size: self.kernel_size,
        }
    }
}

pub const GROUND_TRUTH_NAME: &str = "ground_truth.png";
pub const SIDECAR_NAME: &str = "sidecar.json";

/// Writes numbered frames, the ground truth, and the parameter sidecar.
pub fn save_stack(
    dir: &Path,
    frames: &FrameStack,
    ground_truth: &Array3<f64>,
    sidecar: &SimulationSidecar,
) -> Result<(), IoError> {
    fs::create_dir_all(dir)?;
    for (k, f) in frames.iter().enumerate() {
        write_png(&dir.join(format!("frame_{k:03}.png")), f)?;
    }
    write_png(&dir.join(GROUND_TRUTH_NAME), ground_truth)?;
    atomic_write_json(&dir.join(SIDECAR_NAME), sidecar)
}

/// Frame image paths in lexical order, excluding the ground-truth image.
pub fn frame_paths(dir: &Path) -> Result<Vec<PathBuf>, IoError> {
    Ok(png_paths(dir)?
        .into_iter()
        .filter(|p| p.file_name().is_none_or(|n| n != GROUND_TRUTH_NAME))
        .collect())
}

/// Loads frames from paths, resizing to (m, n) when a target is given.
pub fn load_frames(
    paths: &[PathBuf],
    target: Option<(usize, usize)>,
) -> Result<FrameStack, IoError> {
    paths
        .iter()
        .map(|p| {
            let img = read_png(p)?;
            Ok(match target {
                Some((m, n)) => resize_image(&img, m, n),
                None => img,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Loss curves

/// Writes the per-epoch loss terms as CSV.
pub fn write_loss_csv(path: &Path, history: &[LossRecord]) -> Result<(), IoError> {
    let mut out = String::from("epoch,term_a,term_b,term_c,total\n");
    for r in history {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epoch, r.term_a, r.term_b, r.term_c, r.total
        ));
    }
    atomic_write(path, out.as_bytes())
}

/// Reads a loss CSV back into records.
pub fn read_loss_csv(path: &Path) -> Result<Vec<LossRecord>, IoError> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 5 {
            return Err(IoError::Format(format!("bad CSV row: {line}")));
        }
        let num = |s: &str| {
            s.parse::<f64>().map_err(|_| IoError::Format(format!("bad number {s:?} in CSV")))
        };
        out.push(LossRecord {
            epoch: parts[0]
                .parse()
                .map_err(|_| IoError::Format(format!("bad epoch {:?} in CSV", parts[0])))?,
            term_a: num(parts[1])?,
            term_b: num(parts[2])?,
            term_c: num(parts[3])?,
            total: num(parts[4])?,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Training checkpoints

const CKPT_HEADER: &str = "nert-ckpt-v1";

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    config: RestorationConfig,
    epochs_init_done: usize,
    epochs_main_done: usize,
    frame_counter: usize,
    lr: f64,
    history: Vec<LossRecord>,
    t_gen: u64,
    t_def: Vec<u64>,
    t_alpha: Vec<u64>,
    n_deformers: usize,
    n_blurs: usize,
}

fn group_entries(prefix: &str, ws: &[Array2<f32>], out: &mut Vec<ContainerEntry>) {
    for (i, w) in ws.iter().enumerate() {
        out.push(ContainerEntry::from_array2(&format!("{prefix}/w{i}"), w));
    }
}

fn moment_entries(prefix: &str, g: &AdamGroup<f32>, out: &mut Vec<ContainerEntry>) {
    for (i, m) in g.m.iter().enumerate() {
        out.push(ContainerEntry::from_array2(&format!("{prefix}/m{i}"), m));
    }
    for (i, v) in g.v.iter().enumerate() {
        out.push(ContainerEntry::from_array2(&format!("{prefix}/v{i}"), v));
    }
}

/// Saves the full training state (parameters, optimizer moments, history)
/// as a versioned container file.
pub fn save_checkpoint(path: &Path, state: &RestorationState<f32>) -> Result<(), IoError> {
    let meta = CheckpointMeta {
        config: state.config.clone(),
        epochs_init_done: state.epochs_init_done,
        epochs_main_done: state.epochs_main_done,
        frame_counter: state.frame_counter,
        lr: state.lr,
        history: state.history.clone(),
        t_gen: state.opt_gen.t,
        t_def: state.opt_def.iter().map(|g| g.t).collect(),
        t_alpha: state.opt_alpha.iter().map(|g| g.t).collect(),
        n_deformers: state.deformers.len(),
        n_blurs: state.blurs.len(),
    };
    let mut entries = Vec::new();
    group_entries("generator", &state.generator.weights, &mut entries);
    moment_entries("adam/generator", &state.opt_gen, &mut entries);
    for (k, d) in state.deformers.iter().enumerate() {
        group_entries(&format!("deformer_{k:03}"), &d.weights, &mut entries);
        moment_entries(&format!("adam/deformer_{k:03}"), &state.opt_def[k], &mut entries);
    }
    for (k, b) in state.blurs.iter().enumerate() {
        entries.push(ContainerEntry::from_array2(&format!("alpha_{k:03}"), &b.alpha));
        moment_entries(&format!("adam/alpha_{k:03}"), &state.opt_alpha[k], &mut entries);
    }
    write_container(path, CKPT_HEADER, &serde_json::to_string(&meta)?, &entries)
}

struct EntryMap(HashMap<String, ContainerEntry>);

impl EntryMap {
    fn array(&self, name: &str) -> Result<Array2<f32>, IoError> {
        self.0
            .get(name)
            .ok_or_else(|| IoError::Format(format!("checkpoint is missing {name}")))?
            .to_array2()
    }

    fn group(&self, prefix: &str, n: usize) -> Result<Vec<Array2<f32>>, IoError> {
        (0..n).map(|i| self.array(&format!("{prefix}/w{i}"))).collect()
    }

    fn moments(&self, prefix: &str, n: usize, t: u64) -> Result<AdamGroup<f32>, IoError> {
        Ok(AdamGroup {
            m: (0..n)
                .map(|i| self.array(&format!("{prefix}/m{i}")))
                .collect::<Result<_, _>>()?,
            v: (0..n)
                .map(|i| self.array(&format!("{prefix}/v{i}")))
                .collect::<Result<_, _>>()?,
            t,
        })
    }
}

fn restore_weights(target: &mut Vec<Array2<f32>>, loaded: Vec<Array2<f32>>) -> Result<(), IoError> {
    if target.len() != loaded.len() {
        return Err(IoError::Format("checkpoint group size mismatch".into()));
    }
    for (t, l) in target.iter_mut().zip(loaded) {
        if t.dim() != l.dim() {
            return Err(IoError::Format(format!(
                "checkpoint array shape {:?} does not match expected {:?}",
                l.dim(),
                t.dim()
            )));
        }
        *t = l;
    }
    Ok(())
}

/// Loads a checkpoint. A basis must be supplied when the checkpoint carries
/// blur modules (it is persisted separately); the frame window is not stored
/// and is re-attached by the next optimization call.
pub fn load_checkpoint(
    path: &Path,
    basis: Option<Arc<PsfBasis>>,
) -> Result<RestorationState<f32>, IoError> {
    let (_, json, entries) = read_container(path, Some(CKPT_HEADER))?;
    let meta: CheckpointMeta = serde_json::from_str(&json)?;
    let map = EntryMap(entries.into_iter().map(|e| (e.name.clone(), e)).collect());
    let config = meta.config.clone();

    let mut generator = ImageGenerator::<f32>::new(config.pe_bands, config.seed);
    let n_gen = generator.weights.len();
    restore_weights(&mut generator.weights, map.group("generator", n_gen)?)?;
    let opt_gen = map.moments("adam/generator", n_gen, meta.t_gen)?;

    if meta.t_def.len() != meta.n_deformers || meta.t_alpha.len() != meta.n_blurs {
        return Err(IoError::Format("checkpoint metadata counts disagree".into()));
    }
    let mut deformers = Vec::with_capacity(meta.n_deformers);
    let mut opt_def = Vec::with_capacity(meta.n_deformers);
    for k in 0..meta.n_deformers {
        let mut d = GridDeformer::<f32>::new(config.max_displacement as f32, 0);
        let n = d.weights.len();
        restore_weights(&mut d.weights, map.group(&format!("deformer_{k:03}"), n)?)?;
        opt_def.push(map.moments(&format!("adam/deformer_{k:03}"), n, meta.t_def[k])?);
        deformers.push(d);
    }

    let mut blurs = Vec::with_capacity(meta.n_blurs);
    let mut opt_alpha = Vec::with_capacity(meta.n_blurs);
    if meta.n_blurs > 0 {
        let basis = basis.ok_or_else(|| {
            IoError::Format("checkpoint carries blur modules; a PSF basis is required".into())
        })?;
        for k in 0..meta.n_blurs {
            let mut b = BlurModule::<f32>::new(
                basis.clone(),
                config.image_size,
                crate::optics::DEFAULT_CONTROL_SPACING,
                config.turbulence(),
                0,
            )
            .map_err(|e| IoError::Format(e.to_string()))?;
            let alpha = map.array(&format!("alpha_{k:03}"))?;
            if alpha.dim() != b.alpha.dim() {
                return Err(IoError::Format("checkpoint alpha shape mismatch".into()));
            }
            b.alpha = alpha;
            opt_alpha.push(map.moments(&format!("adam/alpha_{k:03}"), 1, meta.t_alpha[k])?);
            blurs.push(b);
        }
        return Ok(RestorationState {
            config,
            generator,
            deformers,
            blurs,
            basis: Some(basis),
            history: meta.history,
            epochs_init_done: meta.epochs_init_done,
            epochs_main_done: meta.epochs_main_done,
            frame_counter: meta.frame_counter,
            frames: Vec::new(),
            opt_gen,
            opt_def,
            opt_alpha,
            lr: meta.lr,
        });
    }
    Ok(RestorationState {
        config,
        generator,
        deformers,
        blurs,
        basis,
        history: meta.history,
        epochs_init_done: meta.epochs_init_done,
        epochs_main_done: meta.epochs_main_done,
        frame_counter: meta.frame_counter,
        frames: Vec::new(),
        opt_gen,
        opt_def,
        opt_alpha,
        lr: meta.lr,
    })
}
