//! Parameterized layers over a [`ParamStore`].

use gazecast_tensor::{Element, ParamId, ParamStore, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::Result;

/// RNG for one named parameter, so adding a module never reshuffles the
/// initialization of the others.
pub fn init_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let d = h.finalize();
    ChaCha8Rng::from_seed(d.into())
}

/// Kaiming-uniform (fan-in) weights.
pub fn kaiming_uniform<T: Element>(shape: &[usize], fan_in: usize, seed: u64, name: &str) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let mut rng = init_rng(seed, name);
    Tensor::from_fn(shape.to_vec(), |_| T::lit(rng.gen_range(-bound..bound)))
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    /// Square `k × k` kernel with zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        padding: usize,
        seed: u64,
    ) -> Self {
        let wname = format!("{name}.weight");
        let w = kaiming_uniform(&[cout, cin, k, k], cin * k * k, seed, &wname);
        Self {
            weight: store.add(wname, w),
            bias: store.add(format!("{name}.bias"), Tensor::zeros([cout])),
            stride,
            padding,
        }
    }

    /// 3×3, stride 2, padding 1.
    pub fn down<T: Element>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, seed: u64) -> Self {
        Self::new(store, name, cin, cout, 3, 2, 1, seed)
    }

    /// 3×3, stride 1, padding 1.
    pub fn same<T: Element>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, seed: u64) -> Self {
        Self::new(store, name, cin, cout, 3, 1, 1, seed)
    }

    pub fn pointwise<T: Element>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, seed: u64) -> Self {
        Self::new(store, name, cin, cout, 1, 1, 0, seed)
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        Ok(tape.conv2d(x, w, Some(b), self.stride, self.padding)?)
    }

    pub fn forward_relu<T: Element>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let y = self.forward(tape, store, x)?;
        Ok(tape.relu(y))
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, fan_in: usize, out: usize, seed: u64) -> Self {
        Self::scaled(store, name, fan_in, out, 1.0, seed)
    }

    /// Kaiming-uniform weights multiplied by `gain`.
    pub fn scaled<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        out: usize,
        gain: f64,
        seed: u64,
    ) -> Self {
        let wname = format!("{name}.weight");
        let mut w = kaiming_uniform::<T>(&[out, fan_in], fan_in, seed, &wname);
        let g = T::lit(gain);
        w.data_mut().iter_mut().for_each(|v| *v *= g);
        Self {
            weight: store.add(wname, w),
            bias: store.add(format!("{name}.bias"), Tensor::zeros([out])),
        }
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        Ok(tape.linear(x, w, Some(b))?)
    }
}
