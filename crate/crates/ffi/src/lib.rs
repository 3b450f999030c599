//! C ABI over `sem-core`.
//!
//! Every function returns a [`SemStatus`]; on failure a message describing the
//! error is available from [`sem_last_error_message`] on the same thread.
//! Matrices are passed as row-major `double` buffers with explicit sizes.
//! Handles are opaque and must be released with their `_free` function.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use sem_core::format::{load_sae_weights, save_sae_weights};
use sem_core::metrics::{kl_at_k, maxskew_at_k, Desired};
use sem_core::probes::disentanglement_score;
use sem_core::scoring::{BiasSpec, PromptActivations, PromptRole};
use sem_core::steering::QueryLatents;
use sem_core::{modulation_agnostic, modulation_aware, steer, topk_relu, ModulationVector, SaeWeights, SemError, SteeringContext, Variant};

/// Status codes returned by every exported function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SemStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// Bad argument or configuration value.
    InvalidArgument = 2,
    /// Malformed file, I/O failure or mismatched dimensions.
    Format = 3,
    /// Non-finite values, degenerate inputs or numeric failure.
    Numeric = 4,
    /// An internal panic was caught at the boundary.
    Internal = 5,
}

/// Steering variant selector.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SemVariant {
    SemI = 0,
    SemB = 1,
    SemBi = 2,
}

/// Opaque SAE weights.
pub struct SemSae {
    inner: SaeWeights,
}

/// Opaque steering context: neutral activation, diverse pool and bias scores.
pub struct SemSteering {
    inner: SteeringContext,
    latent_dim: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &SemError) -> SemStatus {
    match e {
        SemError::InvalidArgument(_) | SemError::InvalidConfig(_) => SemStatus::InvalidArgument,
        SemError::Format { .. } | SemError::Io { .. } | SemError::DimensionMismatch { .. } | SemError::EmptyInput(_) => {
            SemStatus::Format
        }
        _ => SemStatus::Numeric,
    }
}

enum Failure {
    Null(&'static str),
    Sem(SemError),
}

impl From<SemError> for Failure {
    fn from(e: SemError) -> Self {
        Failure::Sem(e)
    }
}

type FfiResult = Result<(), Failure>;

/// Runs `f`, translating errors and panics into a status plus last-error message.
fn guard(f: impl FnOnce() -> FfiResult) -> SemStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SemStatus::Ok,
        Ok(Err(Failure::Null(name))) => {
            set_error(format!("null pointer passed for `{name}`"));
            SemStatus::NullPointer
        }
        Ok(Err(Failure::Sem(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            SemStatus::Internal
        }
    }
}

unsafe fn input<'a, T>(p: *const T, len: usize, name: &'static str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Null(name));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn output<'a, T>(p: *mut T, len: usize, name: &'static str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Failure::Null(name));
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

unsafe fn handle<'a, T>(p: *const T, name: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(name))
}

unsafe fn path_arg(p: *const c_char) -> Result<String, Failure> {
    if p.is_null() {
        return Err(Failure::Null("path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(str::to_owned)
        .map_err(|_| Failure::Sem(SemError::InvalidArgument("path is not valid UTF-8".into())))
}

fn write_into(dst: &mut [f64], src: &[f64]) -> FfiResult {
    if dst.len() != src.len() {
        return Err(SemError::DimensionMismatch {
            context: "output buffer",
            expected: src.len(),
            actual: dst.len(),
        }
        .into());
    }
    dst.copy_from_slice(src);
    Ok(())
}

fn rows(data: &[f64], n: usize, cols: usize) -> Vec<Vec<f64>> {
    (0..n).map(|i| data[i * cols..(i + 1) * cols].to_vec()).collect()
}

/// Message for the most recent failure on this thread, or null. The pointer
/// stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn sem_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sem_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads SEMW weights from `path` into a new handle.
#[no_mangle]
pub unsafe extern "C" fn sem_sae_load(path: *const c_char, out: *mut *mut SemSae) -> SemStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let w = load_sae_weights(path_arg(path)?)?;
        *out = Box::into_raw(Box::new(SemSae { inner: w }));
        Ok(())
    })
}

/// Builds a handle from an `s x d` encoder, a `d x s` decoder and a length-`d` bias.
#[no_mangle]
pub unsafe extern "C" fn sem_sae_from_parts(
    encoder: *const f64,
    decoder: *const f64,
    centering_bias: *const f64,
    input_dim: usize,
    latent_dim: usize,
    out: *mut *mut SemSae,
) -> SemStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let n = input_dim * latent_dim;
        let enc = input(encoder, n, "encoder")?.to_vec();
        let dec = input(decoder, n, "decoder")?.to_vec();
        let bias = input(centering_bias, input_dim, "centering_bias")?.to_vec();
        let shape_err = |e: ndarray::ShapeError| SemError::InvalidArgument(e.to_string());
        let w = SaeWeights::new(
            ndarray::Array2::from_shape_vec((latent_dim, input_dim), enc).map_err(shape_err)?,
            ndarray::Array2::from_shape_vec((input_dim, latent_dim), dec).map_err(shape_err)?,
            ndarray::Array1::from(bias),
        )?;
        *out = Box::into_raw(Box::new(SemSae { inner: w }));
        Ok(())
    })
}

/// Writes the handle's weights to `path` as SEMW.
#[no_mangle]
pub unsafe extern "C" fn sem_sae_save(sae: *const SemSae, path: *const c_char) -> SemStatus {
    guard(|| {
        let sae = handle(sae, "sae")?;
        save_sae_weights(&sae.inner, path_arg(path)?)?;
        Ok(())
    })
}

/// Releases a handle; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn sem_sae_free(sae: *mut SemSae) {
    if !sae.is_null() {
        drop(Box::from_raw(sae));
    }
}

/// Embedding dimension `d`, or 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn sem_sae_input_dim(sae: *const SemSae) -> usize {
    sae.as_ref().map_or(0, |s| s.inner.input_dim())
}

/// Latent dimension `s`, or 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn sem_sae_latent_dim(sae: *const SemSae) -> usize {
    sae.as_ref().map_or(0, |s| s.inner.latent_dim())
}

/// Encodes a length-`d` embedding into a length-`s` latent.
#[no_mangle]
pub unsafe extern "C" fn sem_sae_encode(sae: *const SemSae, z: *const f64, z_len: usize, h_out: *mut f64, h_len: usize) -> SemStatus {
    guard(|| {
        let sae = handle(sae, "sae")?;
        let h = sae.inner.encode(input(z, z_len, "z")?)?;
        write_into(output(h_out, h_len, "h_out")?, &h)
    })
}

/// Decodes a length-`s` latent into a length-`d` embedding.
#[no_mangle]
pub unsafe extern "C" fn sem_sae_decode(sae: *const SemSae, h: *const f64, h_len: usize, z_out: *mut f64, z_len: usize) -> SemStatus {
    guard(|| {
        let sae = handle(sae, "sae")?;
        let z = sae.inner.decode(input(h, h_len, "h")?)?;
        write_into(output(z_out, z_len, "z_out")?, &z)
    })
}

/// Keeps the `k` largest entries of `h` (ties to the lower index) and clamps at zero.
#[no_mangle]
pub unsafe extern "C" fn sem_topk_relu(h: *const f64, len: usize, k: usize, out: *mut f64) -> SemStatus {
    guard(|| {
        let r = topk_relu(input(h, len, "h")?, k)?;
        write_into(output(out, len, "out")?, &r)
    })
}

/// Percentile of each coordinate of `probe` against `n_ref` reference rows of length `len`.
#[no_mangle]
pub unsafe extern "C" fn sem_percentile_score(probe: *const f64, len: usize, reference: *const f64, n_ref: usize, out: *mut f64) -> SemStatus {
    guard(|| {
        let probe = input(probe, len, "probe")?;
        let data = input(reference, len * n_ref, "reference")?;
        let latents = rows(data, n_ref, len)
            .into_iter()
            .map(sem_core::LatentVector::new)
            .collect::<Result<Vec<_>, _>>()?;
        let reference = PromptActivations::new("reference", PromptRole::Diverse, latents)?;
        let scores = sem_core::percentile_score(probe, &reference)?;
        write_into(output(out, len, "out")?, &scores)
    })
}

/// Bias-agnostic modulation `M = S_concept^2`.
#[no_mangle]
pub unsafe extern "C" fn sem_modulation_agnostic(s_concept: *const f64, len: usize, out: *mut f64) -> SemStatus {
    guard(|| {
        let m = modulation_agnostic(input(s_concept, len, "s_concept")?)?;
        write_into(output(out, len, "out")?, m.as_slice())
    })
}

/// Bias-aware modulation `M = (1 + S_concept - S_bias)^2`.
#[no_mangle]
pub unsafe extern "C" fn sem_modulation_aware(s_concept: *const f64, s_bias: *const f64, len: usize, out: *mut f64) -> SemStatus {
    guard(|| {
        let m = modulation_aware(input(s_concept, len, "s_concept")?, input(s_bias, len, "s_bias")?)?;
        write_into(output(out, len, "out")?, m.as_slice())
    })
}

/// `h * M + (1 - M) * m_div`, element-wise.
#[no_mangle]
pub unsafe extern "C" fn sem_steer(h: *const f64, modulation: *const f64, m_div: *const f64, len: usize, out: *mut f64) -> SemStatus {
    guard(|| {
        let m = ModulationVector::new(input(modulation, len, "modulation")?.to_vec())?;
        let r = steer(input(h, len, "h")?, &m, input(m_div, len, "m_div")?)?;
        write_into(output(out, len, "out")?, &r)
    })
}

/// Builds a steering context from raw embeddings. `diverse` holds `n_diverse`
/// rows of length `d`; for bias-aware variants `bias` holds the concatenated
/// prompt rows of `n_classes` classes with `class_counts[c]` rows each.
#[no_mangle]
pub unsafe extern "C" fn sem_steering_new(
    sae: *const SemSae,
    variant: SemVariant,
    diverse: *const f64,
    n_diverse: usize,
    bias: *const f64,
    class_counts: *const usize,
    n_classes: usize,
    out: *mut *mut SemSteering,
) -> SemStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let sae = &handle(sae, "sae")?.inner;
        let d = sae.input_dim();
        let encode = |data: &[f64], n: usize| rows(data, n, d).iter().map(|r| sae.encode(r)).collect::<Result<Vec<_>, _>>();
        let variant = match variant {
            SemVariant::SemI => Variant::SemI,
            SemVariant::SemB => Variant::SemB,
            SemVariant::SemBi => Variant::SemBi,
        };
        let diverse = PromptActivations::new("diverse", PromptRole::Diverse, encode(input(diverse, n_diverse * d, "diverse")?, n_diverse)?)?;
        let spec = if n_classes > 0 {
            let counts = input(class_counts, n_classes, "class_counts")?;
            let total: usize = counts.iter().sum();
            let data = input(bias, total * d, "bias")?;
            let mut start = 0;
            let mut classes = Vec::with_capacity(n_classes);
            for (c, &n) in counts.iter().enumerate() {
                let acts = PromptActivations::new(format!("class{c}"), PromptRole::BiasClass, encode(&data[start * d..(start + n) * d], n)?)?;
                classes.push((format!("class{c}"), acts));
                start += n;
            }
            Some(BiasSpec::new("attribute", classes)?)
        } else {
            None
        };
        let ctx = SteeringContext::new(variant, diverse, spec.as_ref())?;
        *out = Box::into_raw(Box::new(SemSteering {
            inner: ctx,
            latent_dim: sae.latent_dim(),
        }));
        Ok(())
    })
}

/// Debiases one query embedding of length `d`. `paraphrases` holds
/// `n_paraphrases` rows (required by `SemI` and `SemBi`). Output is
/// L2-normalized unless `raw` is nonzero.
#[no_mangle]
pub unsafe extern "C" fn sem_steering_debias(
    ctx: *const SemSteering,
    sae: *const SemSae,
    query: *const f64,
    paraphrases: *const f64,
    n_paraphrases: usize,
    raw: i32,
    out: *mut f64,
    out_len: usize,
) -> SemStatus {
    guard(|| {
        let ctx = handle(ctx, "ctx")?;
        let sae = &handle(sae, "sae")?.inner;
        if sae.latent_dim() != ctx.latent_dim {
            return Err(SemError::DimensionMismatch {
                context: "steering context vs sae",
                expected: ctx.latent_dim,
                actual: sae.latent_dim(),
            }
            .into());
        }
        let d = sae.input_dim();
        let original = if query.is_null() { None } else { Some(sae.encode(slice::from_raw_parts(query, d))?) };
        let paraphrases = rows(input(paraphrases, n_paraphrases * d, "paraphrases")?, n_paraphrases, d)
            .iter()
            .map(|r| sae.encode(r))
            .collect::<Result<Vec<_>, _>>()?;
        let q = QueryLatents { original, paraphrases };
        let r = ctx.inner.debias(&q, sae, raw != 0)?;
        write_into(output(out, out_len, "out")?, &r.embedding)
    })
}

#[no_mangle]
pub unsafe extern "C" fn sem_steering_free(ctx: *mut SemSteering) {
    if !ctx.is_null() {
        drop(Box::from_raw(ctx));
    }
}

unsafe fn desired_arg(desired: *const f64, n_groups: usize) -> Result<Desired, Failure> {
    Ok(if desired.is_null() {
        Desired::Uniform
    } else {
        Desired::Pool(slice::from_raw_parts(desired, n_groups).to_vec())
    })
}

/// KL@k of the group labels of a top-k list against `desired` (null = uniform).
#[no_mangle]
pub unsafe extern "C" fn sem_kl_at_k(groups: *const usize, k: usize, n_groups: usize, desired: *const f64, out: *mut f64) -> SemStatus {
    guard(|| {
        let out = out.as_mut().ok_or(Failure::Null("out"))?;
        *out = kl_at_k(input(groups, k, "groups")?, n_groups, &desired_arg(desired, n_groups)?)?;
        Ok(())
    })
}

/// MaxSkew@k of the group labels of a top-k list against `desired` (null = uniform).
#[no_mangle]
pub unsafe extern "C" fn sem_maxskew_at_k(groups: *const usize, k: usize, n_groups: usize, desired: *const f64, out: *mut f64) -> SemStatus {
    guard(|| {
        let out = out.as_mut().ok_or(Failure::Null("out"))?;
        *out = maxskew_at_k(input(groups, k, "groups")?, n_groups, &desired_arg(desired, n_groups)?)?;
        Ok(())
    })
}

/// Disentanglement score from pooled probe accuracies; `Numeric` when undefined.
#[no_mangle]
pub unsafe extern "C" fn sem_disentanglement_score(acc_bp: f64, acc_b: f64, chance_b: f64, raw_out: *mut f64, clamped_out: *mut f64) -> SemStatus {
    guard(|| {
        let raw_out = raw_out.as_mut().ok_or(Failure::Null("raw_out"))?;
        let score = disentanglement_score(acc_bp, acc_b, chance_b)?;
        *raw_out = score.raw;
        if let Some(c) = clamped_out.as_mut() {
            *c = score.clamped;
        }
        Ok(())
    })
}
