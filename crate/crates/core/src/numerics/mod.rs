//! Flat parameter vectors, optimizer kernels, and the checkpoint format.
//!
//! A [`ParamVector`] is an ordered, named-segment view over one flat
//! buffer; it is the unit of broadcast, delta transmission, and EMA
//! blending. [`Gradient`] shares the same layout. Both are immutable
//! values: updates return fresh vectors.

pub mod kernels;
pub mod tape;

use crate::error::{Error, Result};
use crate::scalar::Real;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

/// One named segment of the flat parameter buffer. Matrices are row-major
/// `rows x cols`; vectors use `cols == 1`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Immutable segment map for a training run. Two vectors are element-wise
/// alignable iff they share a layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    segments: Vec<Segment>,
    total: usize,
}

impl Layout {
    pub fn new(specs: impl IntoIterator<Item = (String, usize, usize)>) -> Self {
        let mut segments = Vec::new();
        let mut offset = 0;
        for (name, rows, cols) in specs {
            segments.push(Segment { name, rows, cols, offset });
            offset += rows * cols;
        }
        Layout { segments, total: offset }
    }

    pub fn total_len(&self) -> usize {
        self.total
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment(&self, idx: usize) -> &Segment {
        &self.segments[idx]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.segments.iter().position(|s| s.name == name)
    }
}

fn check_layouts(a: &Arc<Layout>, b: &Arc<Layout>, what: &str) -> Result<()> {
    if Arc::ptr_eq(a, b) || a == b {
        Ok(())
    } else {
        Err(Error::LayoutMismatch(what.to_string()))
    }
}

/// Ordered finite parameter values with a named-segment layout.
#[derive(Debug, Clone)]
pub struct ParamVector<T> {
    layout: Arc<Layout>,
    values: Vec<T>,
}

/// Gradient with the same layout as its run's [`ParamVector`].
#[derive(Debug, Clone)]
pub struct Gradient<T> {
    layout: Arc<Layout>,
    values: Vec<T>,
}

impl<T: Real> ParamVector<T> {
    pub fn zeros(layout: Arc<Layout>) -> Self {
        let values = vec![T::zero(); layout.total_len()];
        ParamVector { layout, values }
    }

    pub fn from_values(layout: Arc<Layout>, values: Vec<T>) -> Result<Self> {
        if values.len() != layout.total_len() {
            return Err(Error::LayoutMismatch(format!(
                "value count {} != layout total {}",
                values.len(),
                layout.total_len()
            )));
        }
        Ok(ParamVector { layout, values })
    }

    /// Uniform init scaled by 1/sqrt(fan-in) per segment.
    pub fn random(layout: Arc<Layout>, rng: &mut impl rand::Rng) -> Self {
        let mut values = vec![T::zero(); layout.total_len()];
        for seg in layout.segments() {
            let fan_in = if seg.cols > 1 { seg.cols } else { seg.rows.max(1) };
            let scale = 1.0 / (fan_in as f64).sqrt();
            for v in &mut values[seg.offset..seg.offset + seg.len()] {
                *v = T::from_f64_lossy(rng.gen_range(-scale..scale));
            }
        }
        ParamVector { layout, values }
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn segment_values(&self, idx: usize) -> &[T] {
        let seg = self.layout.segment(idx);
        &self.values[seg.offset..seg.offset + seg.len()]
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// `self - other`, the model delta transmitted after local training.
    pub fn delta_from(&self, other: &Self) -> Result<Gradient<T>> {
        check_layouts(&self.layout, &other.layout, "delta_from")?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| a - b)
            .collect();
        Ok(Gradient { layout: self.layout.clone(), values })
    }

    /// `self + c * g`.
    pub fn add_scaled(&self, g: &Gradient<T>, c: T) -> Result<Self> {
        check_layouts(&self.layout, &g.layout, "add_scaled")?;
        let values = self
            .values
            .iter()
            .zip(&g.values)
            .map(|(&p, &gv)| p + c * gv)
            .collect();
        Ok(ParamVector { layout: self.layout.clone(), values })
    }

    /// Element-wise convex blend `rate * self + (1 - rate) * other`.
    pub fn blend(&self, other: &Self, rate: T) -> Result<Self> {
        check_layouts(&self.layout, &other.layout, "blend")?;
        let one = T::one();
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(&t, &s)| rate * t + (one - rate) * s)
            .collect();
        Ok(ParamVector { layout: self.layout.clone(), values })
    }

    pub fn l2_norm(&self) -> T {
        self.values.iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), |m, d| if d > m { d } else { m })
    }
}

impl<T: Real> Gradient<T> {
    pub fn zeros(layout: Arc<Layout>) -> Self {
        let values = vec![T::zero(); layout.total_len()];
        Gradient { layout, values }
    }

    pub fn from_values(layout: Arc<Layout>, values: Vec<T>) -> Result<Self> {
        if values.len() != layout.total_len() {
            return Err(Error::LayoutMismatch(format!(
                "value count {} != layout total {}",
                values.len(),
                layout.total_len()
            )));
        }
        Ok(Gradient { layout, values })
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn l2_norm(&self) -> T {
        self.values.iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    pub fn scale(&self, c: T) -> Self {
        Gradient {
            layout: self.layout.clone(),
            values: self.values.iter().map(|&v| v * c).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        check_layouts(&self.layout, &other.layout, "gradient add")?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(Gradient { layout: self.layout.clone(), values })
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        check_layouts(&self.layout, &other.layout, "gradient add")?;
        for (a, &b) in self.values.iter_mut().zip(&other.values) {
            *a = *a + b;
        }
        Ok(())
    }
}

/// SGD or Adam state; moments share the run's parameter layout.
#[derive(Debug, Clone)]
pub enum OptimizerState<T> {
    Sgd {
        lr: T,
        step: u64,
    },
    Adam {
        lr: T,
        beta1: T,
        beta2: T,
        eps: T,
        step: u64,
        m: Vec<T>,
        v: Vec<T>,
        layout: Arc<Layout>,
    },
}

impl<T: Real> OptimizerState<T> {
    pub fn sgd(lr: T) -> Self {
        OptimizerState::Sgd { lr, step: 0 }
    }

    /// Adam with the usual defaults: beta1=0.9, beta2=0.999, eps=1e-8.
    pub fn adam(lr: T, layout: Arc<Layout>) -> Self {
        OptimizerState::Adam {
            lr,
            beta1: T::from_f64_lossy(0.9),
            beta2: T::from_f64_lossy(0.999),
            eps: T::from_f64_lossy(1e-8),
            step: 0,
            m: vec![T::zero(); layout.total_len()],
            v: vec![T::zero(); layout.total_len()],
            layout,
        }
    }

    pub fn step_count(&self) -> u64 {
        match self {
            OptimizerState::Sgd { step, .. } => *step,
            OptimizerState::Adam { step, .. } => *step,
        }
    }

    /// Applies whichever update this state holds.
    pub fn update(&mut self, params: &ParamVector<T>, grad: &Gradient<T>) -> Result<ParamVector<T>> {
        match self {
            OptimizerState::Sgd { .. } => sgd_step(self, params, grad),
            OptimizerState::Adam { .. } => adam_step(self, params, grad),
        }
    }
}

/// `params - lr * grad`; increments the step count.
pub fn sgd_step<T: Real>(
    state: &mut OptimizerState<T>,
    params: &ParamVector<T>,
    grad: &Gradient<T>,
) -> Result<ParamVector<T>> {
    let lr = match state {
        OptimizerState::Sgd { lr, step } => {
            *step += 1;
            *lr
        }
        _ => return Err(Error::Config("sgd_step on non-SGD state".into())),
    };
    let next = params.add_scaled(grad, -lr)?;
    ensure_finite_update(&next)?;
    Ok(next)
}

/// Standard Adam with bias correction; moments updated in place.
pub fn adam_step<T: Real>(
    state: &mut OptimizerState<T>,
    params: &ParamVector<T>,
    grad: &Gradient<T>,
) -> Result<ParamVector<T>> {
    let (lr, beta1, beta2, eps, step, m, v, layout) = match state {
        OptimizerState::Adam { lr, beta1, beta2, eps, step, m, v, layout } => {
            (*lr, *beta1, *beta2, *eps, step, m, v, layout)
        }
        _ => return Err(Error::Config("adam_step on non-Adam state".into())),
    };
    check_layouts(layout, grad.layout(), "adam moments vs grad")?;
    check_layouts(layout, params.layout(), "adam moments vs params")?;
    *step += 1;
    let t = *step;
    let one = T::one();
    let bc1 = one - beta1.powi(t as i32);
    let bc2 = one - beta2.powi(t as i32);
    let mut values = Vec::with_capacity(params.values().len());
    for i in 0..params.values().len() {
        let g = grad.values()[i];
        m[i] = beta1 * m[i] + (one - beta1) * g;
        v[i] = beta2 * v[i] + (one - beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        values.push(params.values()[i] - lr * m_hat / (v_hat.sqrt() + eps));
    }
    let next = ParamVector { layout: params.layout().clone(), values };
    ensure_finite_update(&next)?;
    Ok(next)
}

fn ensure_finite_update<T: Real>(p: &ParamVector<T>) -> Result<()> {
    if p.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { node: 0, op: "optimizer update" })
    }
}

/// Which model a checkpoint holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Student,
    Teacher,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    round: u64,
    role: Role,
    layout: Layout,
}

const CKPT_MAGIC: &[u8; 8] = b"FSLCKPT\x01";
const CKPT_VERSION: u32 = 1;

/// Writes a versioned checkpoint: layout descriptor plus raw
/// little-endian f64 segments, with round and role in the header.
pub fn save_checkpoint<T: Real>(
    path: &Path,
    params: &ParamVector<T>,
    round: u64,
    role: Role,
) -> Result<()> {
    let header = CheckpointHeader {
        version: CKPT_VERSION,
        round,
        role,
        layout: (**params.layout()).clone(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(CKPT_MAGIC)?;
    f.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    f.write_all(&header_bytes)?;
    for &v in params.values() {
        let x = v.to_f64().ok_or_else(|| Error::Checkpoint("non-representable value".into()))?;
        f.write_all(&x.to_le_bytes())?;
    }
    f.flush()?;
    Ok(())
}

/// Reads a checkpoint back; returns `(params, round, role)`.
pub fn load_checkpoint<T: Real>(path: &Path) -> Result<(ParamVector<T>, u64, Role)> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(Error::Checkpoint(format!("bad magic in {}", path.display())));
    }
    let mut len_bytes = [0u8; 4];
    f.read_exact(&mut len_bytes)?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    f.read_exact(&mut header_bytes)?;
    let header: CheckpointHeader = serde_json::from_slice(&header_bytes)?;
    if header.version != CKPT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {}", header.version)));
    }
    let layout = Arc::new(header.layout);
    let mut values = Vec::with_capacity(layout.total_len());
    let mut buf = [0u8; 8];
    for _ in 0..layout.total_len() {
        f.read_exact(&mut buf)?;
        values.push(T::from_f64_lossy(f64::from_le_bytes(buf)));
    }
    Ok((ParamVector::from_values(layout, values)?, header.round, header.role))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;

    fn tiny_layout() -> Arc<Layout> {
        Arc::new(Layout::new(vec![
            ("w".to_string(), 2, 2),
            ("b".to_string(), 2, 1),
        ]))
    }

    #[test]
    fn layout_offsets_and_total() {
        let l = tiny_layout();
        assert_eq!(l.total_len(), 6);
        assert_eq!(l.segment(0).offset, 0);
        assert_eq!(l.segment(1).offset, 4);
        assert_eq!(l.index_of("b"), Some(1));
    }

    #[test]
    fn sgd_step_arithmetic() {
        // params=[1,1], grad=[1,2], lr=0.5 -> [0.5, 0]
        let layout = Arc::new(Layout::new(vec![("p".to_string(), 2, 1)]));
        let p = ParamVector::from_values(layout.clone(), vec![1.0, 1.0]).unwrap();
        let g = Gradient::from_values(layout.clone(), vec![1.0, 2.0]).unwrap();
        let mut st = OptimizerState::sgd(0.5);
        let next = sgd_step(&mut st, &p, &g).unwrap();
        assert_eq!(next.values(), &[0.5, 0.0]);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn sgd_zero_grad_is_identity() {
        let layout = tiny_layout();
        let mut rng = derive_rng(1, &[9]);
        let p = ParamVector::<f64>::random(layout.clone(), &mut rng);
        let g = Gradient::zeros(layout);
        let mut st = OptimizerState::sgd(0.3);
        let next = sgd_step(&mut st, &p, &g).unwrap();
        assert_eq!(next.values(), p.values());
    }

    #[test]
    fn sgd_two_steps_equal_one_summed_step() {
        let layout = tiny_layout();
        let mut rng = derive_rng(2, &[1]);
        let p = ParamVector::<f64>::random(layout.clone(), &mut rng);
        let g1 = Gradient::from_values(layout.clone(), vec![0.1, -0.2, 0.3, 0.0, 1.0, -1.0]).unwrap();
        let g2 = Gradient::from_values(layout.clone(), vec![0.5, 0.5, -0.5, 0.25, 0.0, 2.0]).unwrap();
        let mut st = OptimizerState::sgd(0.1);
        let a = sgd_step(&mut st, &p, &g1).unwrap();
        let a = sgd_step(&mut st, &a, &g2).unwrap();
        let combined = g1.add(&g2).unwrap();
        let mut st2 = OptimizerState::sgd(0.1);
        let b = sgd_step(&mut st2, &p, &combined).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_first_step_magnitude_and_sign() {
        let layout = Arc::new(Layout::new(vec![("p".to_string(), 3, 1)]));
        let p = ParamVector::from_values(layout.clone(), vec![0.0, 0.0, 0.0]).unwrap();
        let g = Gradient::from_values(layout.clone(), vec![0.5, -2.0, 1e-3]).unwrap();
        let lr = 0.01_f64;
        let mut st = OptimizerState::adam(lr, layout);
        let next = adam_step(&mut st, &p, &g).unwrap();
        for (i, (&x, &gv)) in next.values().iter().zip(g.values()).enumerate() {
            let (x, gv): (f64, f64) = (x, gv);
            // first-step Adam: update = -lr * g/(|g| + eps-scale); sign-preserving,
            // magnitude close to lr for |g| >> eps
            assert!(x * gv <= 0.0, "component {i} not sign-opposed");
            assert!(x.abs() <= lr * 1.0000001);
            if gv.abs() > 1e-2 {
                assert!((x.abs() - lr).abs() < lr * 1e-4);
            }
        }
    }

    #[test]
    fn adam_zero_grad_from_init_is_identity() {
        let layout = tiny_layout();
        let mut rng = derive_rng(3, &[7]);
        let p = ParamVector::<f64>::random(layout.clone(), &mut rng);
        let g = Gradient::zeros(layout.clone());
        let mut st = OptimizerState::adam(0.01, layout);
        let next = adam_step(&mut st, &p, &g).unwrap();
        assert_eq!(next.values(), p.values());
    }

    #[test]
    fn adam_matches_textbook_reference_on_quadratic() {
        // independent reference loop over plain Vecs, same defaults
        let layout = Arc::new(Layout::new(vec![("p".to_string(), 4, 1)]));
        let target = [1.0, -2.0, 0.5, 3.0];
        let start = vec![5.0, 5.0, 5.0, 5.0];
        let mut p = ParamVector::from_values(layout.clone(), start.clone()).unwrap();
        let mut st = OptimizerState::adam(0.05, layout.clone());

        let (mut rp, mut rm, mut rv) = (start, vec![0.0f64; 4], vec![0.0f64; 4]);
        let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8f64, 0.05f64);

        let loss = |p: &[f64]| -> f64 {
            p.iter().zip(&target).map(|(x, t)| (x - t) * (x - t)).sum()
        };
        let mut losses = Vec::new();
        for t in 1..=100u64 {
            let g: Vec<f64> = p.values().iter().zip(&target).map(|(x, t)| 2.0 * (x - t)).collect();
            let grad = Gradient::from_values(layout.clone(), g.clone()).unwrap();
            p = adam_step(&mut st, &p, &grad).unwrap();

            for i in 0..4 {
                let gi = 2.0 * (rp[i] - target[i]);
                rm[i] = b1 * rm[i] + (1.0 - b1) * gi;
                rv[i] = b2 * rv[i] + (1.0 - b2) * gi * gi;
                let mh = rm[i] / (1.0 - b1.powi(t as i32));
                let vh = rv[i] / (1.0 - b2.powi(t as i32));
                rp[i] -= lr * mh / (vh.sqrt() + eps);
            }
            for i in 0..4 {
                assert!((p.values()[i] - rp[i]).abs() < 1e-12, "diverged from reference at step {t}");
            }
            losses.push(loss(p.values()));
        }
        // monotone decrease after warmup on a quadratic bowl
        for w in losses[10..].windows(2) {
            assert!(w[1] <= w[0] + 1e-9);
        }
        assert!(losses.last().unwrap() < &(losses[0] / 10.0));
    }

    #[test]
    fn layout_mismatch_is_an_error() {
        let la = tiny_layout();
        let lb = Arc::new(Layout::new(vec![("other".to_string(), 3, 1)]));
        let p = ParamVector::<f64>::zeros(la);
        let g = Gradient::zeros(lb);
        let mut st = OptimizerState::sgd(0.1);
        assert!(matches!(sgd_step(&mut st, &p, &g), Err(Error::LayoutMismatch(_))));
    }

    #[test]
    fn checkpoint_roundtrip_bit_identical() {
        let layout = tiny_layout();
        let mut rng = derive_rng(4, &[4]);
        let p = ParamVector::<f64>::random(layout, &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &p, 17, Role::Teacher).unwrap();
        let (q, round, role) = load_checkpoint::<f64>(&path).unwrap();
        assert_eq!(round, 17);
        assert_eq!(role, Role::Teacher);
        assert_eq!(p.values().len(), q.values().len());
        for (a, b) in p.values().iter().zip(q.values()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(p.layout().segments(), q.layout().segments());
    }

    #[test]
    fn updates_stay_finite_for_modest_lr() {
        let layout = tiny_layout();
        let mut rng = derive_rng(5, &[5]);
        let mut p = ParamVector::<f64>::random(layout.clone(), &mut rng);
        let mut st = OptimizerState::adam(1.0, layout.clone());
        for i in 0..50 {
            let g = Gradient::from_values(
                layout.clone(),
                (0..6).map(|j| ((i * 7 + j) as f64).sin() * 10.0).collect(),
            )
            .unwrap();
            p = st.update(&p, &g).unwrap();
            assert!(p.all_finite());
        }
    }
}
