use super::{cast, Real};

/// Adam with the AMSGrad correction and L2 weight decay folded into the
/// gradient. State is kept per parameter slice, in the order the slices are
/// presented to [`AmsGrad::step`].
#[derive(Clone, Debug)]
pub struct AmsGrad<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: i32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    v_max: Vec<Vec<T>>,
}

impl<T: Real> AmsGrad<T> {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AmsGrad { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, t: 0, m: vec![], v: vec![], v_max: vec![] }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// One update. `params[i]` and `grads[i]` must keep the same length and
    /// meaning across calls.
    pub fn step(&mut self, params: Vec<&mut [T]>, grads: Vec<&[T]>) {
        assert_eq!(params.len(), grads.len(), "parameter/gradient groups");
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![T::zero(); g.len()]).collect();
            self.v = self.m.clone();
            self.v_max = self.m.clone();
        }
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(self.t);
        let bc2_sqrt = (1.0 - b2.powi(self.t)).sqrt();
        let step: T = cast(self.lr / bc1);
        let (b1t, b2t, wd, eps): (T, T, T, T) = (cast(b1), cast(b2), cast(self.weight_decay), cast(self.eps));
        let (ob1, ob2): (T, T) = (cast(1.0 - b1), cast(1.0 - b2));
        let bc2: T = cast(bc2_sqrt);
        for (gi, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let (m, v, vm) = (&mut self.m[gi], &mut self.v[gi], &mut self.v_max[gi]);
            for i in 0..p.len() {
                let gr = g[i] + wd * p[i];
                m[i] = b1t * m[i] + ob1 * gr;
                v[i] = b2t * v[i] + ob2 * gr * gr;
                if v[i] > vm[i] {
                    vm[i] = v[i];
                }
                let denom = vm[i].sqrt() / bc2 + eps;
                p[i] -= step * m[i] / denom;
            }
        }
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Real>(grads: Vec<&mut [T]>, max_norm: f64) -> f64 {
    let total: f64 = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| {
            let v = v.to_f64().unwrap_or(f64::NAN);
            v * v
        })
        .sum::<f64>()
        .sqrt();
    if total > max_norm {
        let scale: T = cast(max_norm / (total + 1e-6));
        for g in grads {
            g.iter_mut().for_each(|v| *v *= scale);
        }
    }
    total
}
