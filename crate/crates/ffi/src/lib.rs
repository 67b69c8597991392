//! C ABI over `mixdl`.
//!
//! Every function returns a [`MixdlStatus`]; on failure the message is kept
//! per thread and can be read with [`mixdl_last_error_message`]. Arrays are
//! row-major `double` buffers whose sizes the caller states explicitly.
//! Handles are opaque and must be released with their `_free` function.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use mixdl::checkpoint;
use mixdl::config::RunConfig;
use mixdl::losses::generator_distance_loss;
use mixdl::metrics::{frechet_distance, knn_precision_recall};
use mixdl::mixup::{self, CoefficientSource, LatentBatch, LatentSpace, MixupCoefficients};
use mixdl::models::Generator;
use mixdl::similarity::{self, FeatureLayer, FeatureStack, ProbVector};
use mixdl::train::{Phase, Trainer};
use mixdl::MixdlError;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MixdlStatus {
    Ok = 0,
    NullPointer = 1,
    Parameter = 2,
    NumericalDomain = 3,
    Configuration = 4,
    Ingestion = 5,
    Io = 6,
    Checkpoint = 7,
    NonFinite = 8,
    Utf8 = 9,
    Panic = 10,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MixdlCoefficientSource {
    Dirichlet = 0,
    Gaussian = 1,
    Uniform = 2,
}

/// One training step's losses; `phase` is 0 for adversarial, 1 for mixup.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MixdlStepRecord {
    pub step: u64,
    pub phase: u32,
    pub adv_g: f64,
    pub adv_d: f64,
    pub dist_g: f64,
    pub dist_d: f64,
    pub r1: f64,
}

/// Opaque generator loaded from a checkpoint.
pub struct MixdlGenerator {
    generator: Generator,
}

/// Opaque trainer built from a run config.
pub struct MixdlTrainer {
    trainer: Trainer,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

enum Failure {
    Null(&'static str),
    Utf8(&'static str),
    Core(MixdlError),
}

impl From<MixdlError> for Failure {
    fn from(e: MixdlError) -> Self {
        Failure::Core(e)
    }
}

type FfiResult<T> = Result<T, Failure>;

fn status_of(e: &MixdlError) -> MixdlStatus {
    match e {
        MixdlError::Parameter(_) => MixdlStatus::Parameter,
        MixdlError::NumericalDomain(_) => MixdlStatus::NumericalDomain,
        MixdlError::Configuration(_) => MixdlStatus::Configuration,
        MixdlError::Ingestion { .. } => MixdlStatus::Ingestion,
        MixdlError::Io { .. } => MixdlStatus::Io,
        MixdlError::Checkpoint { .. } => MixdlStatus::Checkpoint,
        MixdlError::NonFinite { .. } => MixdlStatus::NonFinite,
    }
}

fn guard(f: impl FnOnce() -> FfiResult<()>) -> MixdlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            MixdlStatus::Ok
        }
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("{what} is null"));
            MixdlStatus::NullPointer
        }
        Ok(Err(Failure::Utf8(what))) => {
            set_error(format!("{what} is not valid UTF-8"));
            MixdlStatus::Utf8
        }
        Ok(Err(Failure::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            MixdlStatus::Panic
        }
    }
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &'static str) -> FfiResult<&'a [f64]> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a>(p: *mut f64, len: usize, what: &'static str) -> FfiResult<&'a mut [f64]> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn out_ref<'a, T>(p: *mut T, what: &'static str) -> FfiResult<&'a mut T> {
    p.as_mut().ok_or(Failure::Null(what))
}

unsafe fn path_arg(p: *const c_char, what: &'static str) -> FfiResult<PathBuf> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| Failure::Utf8(what))
}

fn rows(data: &[f64], n: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..n).map(|i| data[i * dim..(i + 1) * dim].to_vec()).collect()
}

/// Copies the calling thread's last error message into `buf` (NUL
/// terminated, truncated to `len`). Returns the full message length
/// excluding the terminator.
#[no_mangle]
pub unsafe extern "C" fn mixdl_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// NUL-terminated library version; static storage.
#[no_mangle]
pub extern "C" fn mixdl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Draws `n` simplex weights into `out[n]`. `alpha` has 1 or `n` entries.
#[no_mangle]
pub unsafe extern "C" fn mixdl_sample_coefficients(
    n: usize,
    source: MixdlCoefficientSource,
    alpha: *const f64,
    alpha_len: usize,
    seed: u64,
    out: *mut f64,
) -> MixdlStatus {
    guard(|| {
        let alpha = slice(alpha, alpha_len, "alpha")?;
        let out = slice_mut(out, n, "out")?;
        let source = match source {
            MixdlCoefficientSource::Dirichlet => CoefficientSource::Dirichlet,
            MixdlCoefficientSource::Gaussian => CoefficientSource::Gaussian,
            MixdlCoefficientSource::Uniform => CoefficientSource::Uniform,
        };
        let c = mixup::sample_coefficients(n, source, alpha, &mut ChaCha8Rng::seed_from_u64(seed))?;
        out.copy_from_slice(c.values());
        Ok(())
    })
}

fn coefficients(c: &[f64]) -> Result<MixupCoefficients, MixdlError> {
    MixupCoefficients::new(c.to_vec(), CoefficientSource::Dirichlet, vec![1.0])
}

/// `out[dim] = sum_i coeff[i] * latents[i]` for `latents[n][dim]`.
#[no_mangle]
pub unsafe extern "C" fn mixdl_anchor_latent(
    latents: *const f64,
    n: usize,
    dim: usize,
    coeff: *const f64,
    out: *mut f64,
) -> MixdlStatus {
    guard(|| {
        let z = slice(latents, n * dim, "latents")?;
        let c = coefficients(slice(coeff, n, "coeff")?)?;
        let out = slice_mut(out, dim, "out")?;
        let batch = LatentBatch::new(rows(z, n, dim), LatentSpace::Prior)?;
        out.copy_from_slice(&mixup::anchor_latent(&batch, &c)?.values);
        Ok(())
    })
}

/// Softmax of the coefficients into `out[n]`.
#[no_mangle]
pub unsafe extern "C" fn mixdl_target_distribution(coeff: *const f64, n: usize, out: *mut f64) -> MixdlStatus {
    guard(|| {
        let c = coefficients(slice(coeff, n, "coeff")?)?;
        slice_mut(out, n, "out")?.copy_from_slice(mixup::target_distribution(&c).probs());
        Ok(())
    })
}

/// Softmax over cosine similarities of `anchor[dim]` to each of
/// `batch[n][dim]`, into `out[n]`.
#[no_mangle]
pub unsafe extern "C" fn mixdl_similarity_profile(
    anchor: *const f64,
    batch: *const f64,
    n: usize,
    dim: usize,
    out: *mut f64,
) -> MixdlStatus {
    guard(|| {
        let a = slice(anchor, dim, "anchor")?;
        let b = rows(slice(batch, n * dim, "batch")?, n, dim);
        let q = similarity::similarity_profile(a, &b)?;
        slice_mut(out, n, "out")?.copy_from_slice(q.probs());
        Ok(())
    })
}

/// `KL(q || p)` over `n`-entry distributions.
#[no_mangle]
pub unsafe extern "C" fn mixdl_kl_divergence(q: *const f64, p: *const f64, n: usize, out: *mut f64) -> MixdlStatus {
    guard(|| {
        let q = ProbVector::new(slice(q, n, "q")?.to_vec())?;
        let p = ProbVector::new(slice(p, n, "p")?.to_vec())?;
        *out_ref(out, "out")? = similarity::kl_divergence(&q, &p)?;
        Ok(())
    })
}

/// Generator distance loss over `layers` equally wide layers:
/// `anchors[layers][dim]`, `batch[layers][n][dim]`, `coeff[n]`.
#[no_mangle]
pub unsafe extern "C" fn mixdl_generator_distance_loss(
    anchors: *const f64,
    batch: *const f64,
    layers: usize,
    n: usize,
    dim: usize,
    coeff: *const f64,
    out: *mut f64,
) -> MixdlStatus {
    guard(|| {
        let a = slice(anchors, layers * dim, "anchors")?;
        let b = slice(batch, layers * n * dim, "batch")?;
        let c = coefficients(slice(coeff, n, "coeff")?)?;
        let stack = FeatureStack::new(
            (0..layers)
                .map(|l| FeatureLayer {
                    id: format!("layer{l}"),
                    anchor: a[l * dim..(l + 1) * dim].to_vec(),
                    batch: rows(&b[l * n * dim..(l + 1) * n * dim], n, dim),
                })
                .collect(),
        )?;
        *out_ref(out, "out")? = generator_distance_loss(&stack, &c)?;
        Ok(())
    })
}

/// Fréchet distance between `a[na][dim]` and `b[nb][dim]`.
#[no_mangle]
pub unsafe extern "C" fn mixdl_frechet_distance(
    a: *const f64,
    na: usize,
    b: *const f64,
    nb: usize,
    dim: usize,
    out: *mut f64,
) -> MixdlStatus {
    guard(|| {
        let a = rows(slice(a, na * dim, "a")?, na, dim);
        let b = rows(slice(b, nb * dim, "b")?, nb, dim);
        *out_ref(out, "out")? = frechet_distance(&a, &b)?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn mixdl_knn_precision_recall(
    real: *const f64,
    n_real: usize,
    fake: *const f64,
    n_fake: usize,
    dim: usize,
    k: usize,
    precision: *mut f64,
    recall: *mut f64,
) -> MixdlStatus {
    guard(|| {
        let r = rows(slice(real, n_real * dim, "real")?, n_real, dim);
        let f = rows(slice(fake, n_fake * dim, "fake")?, n_fake, dim);
        let (p, rc) = knn_precision_recall(&r, &f, k)?;
        *out_ref(precision, "precision")? = p;
        *out_ref(recall, "recall")? = rc;
        Ok(())
    })
}

/// Loads the generator from a checkpoint file.
#[no_mangle]
pub unsafe extern "C" fn mixdl_generator_load(path: *const c_char, out: *mut *mut MixdlGenerator) -> MixdlStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        let out = out_ref(out, "out")?;
        let ck = checkpoint::load(&path)?;
        *out = Box::into_raw(Box::new(MixdlGenerator {
            generator: ck.state.generator,
        }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn mixdl_generator_free(handle: *mut MixdlGenerator) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Latent width, or 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn mixdl_generator_latent_dim(handle: *const MixdlGenerator) -> usize {
    handle.as_ref().map_or(0, |h| h.generator.latent_dim())
}

/// Output side length in pixels, or 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn mixdl_generator_resolution(handle: *const MixdlGenerator) -> usize {
    handle.as_ref().map_or(0, |h| h.generator.resolution())
}

/// Renders `z[n][latent_dim]` into `out[n][3][res][res]`, values in [-1, 1].
#[no_mangle]
pub unsafe extern "C" fn mixdl_generator_generate(
    handle: *const MixdlGenerator,
    z: *const f64,
    n: usize,
    out: *mut f64,
) -> MixdlStatus {
    guard(|| {
        let g = &handle.as_ref().ok_or(Failure::Null("handle"))?.generator;
        let d = g.latent_dim();
        let r = g.resolution();
        let z = rows(slice(z, n * d, "z")?, n, d);
        let out = slice_mut(out, n * 3 * r * r, "out")?;
        let images = g.generate(&z)?;
        for (dst, img) in out.chunks_mut(3 * r * r).zip(&images) {
            dst.copy_from_slice(img.data());
        }
        Ok(())
    })
}

/// Builds a trainer from a TOML run config file.
#[no_mangle]
pub unsafe extern "C" fn mixdl_trainer_new(config_path: *const c_char, out: *mut *mut MixdlTrainer) -> MixdlStatus {
    guard(|| {
        let path = path_arg(config_path, "config_path")?;
        let out = out_ref(out, "out")?;
        let cfg = RunConfig::load(&path)?;
        let trainer = Trainer::new(cfg.train.clone(), cfg.model.clone(), cfg.load_dataset()?)?;
        *out = Box::into_raw(Box::new(MixdlTrainer { trainer }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn mixdl_trainer_free(handle: *mut MixdlTrainer) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Runs one step (adversarial or mixup, alternating).
#[no_mangle]
pub unsafe extern "C" fn mixdl_trainer_step(handle: *mut MixdlTrainer, record: *mut MixdlStepRecord) -> MixdlStatus {
    guard(|| {
        let t = &mut handle.as_mut().ok_or(Failure::Null("handle"))?.trainer;
        let out = out_ref(record, "record")?;
        let r = t.step()?;
        *out = MixdlStepRecord {
            step: r.step,
            phase: match r.phase {
                Phase::Adversarial => 0,
                Phase::Mixup => 1,
            },
            adv_g: r.adv_g,
            adv_d: r.adv_d,
            dist_g: r.dist_g,
            dist_d: r.dist_d,
            r1: r.r1,
        };
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn mixdl_trainer_save(handle: *const MixdlTrainer, path: *const c_char) -> MixdlStatus {
    guard(|| {
        let t = &handle.as_ref().ok_or(Failure::Null("handle"))?.trainer;
        t.save_checkpoint(&path_arg(path, "path")?)?;
        Ok(())
    })
}
