//! Fully connected residual network on single-voxel SH vectors.
//!
//! ```text
//! x(45) -> x1(400) -> x2(45) -> x3(200) -> x4(45) -> [x2 + x4] -> x5(200) -> sh(45), fractions(3)
//! ```
//! Hidden layers use ReLU; both heads are linear.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::nn::{dense_grad_raw, dense_raw, relu_grad_raw, scaled_he_uniform, Gradients, ParameterStore, Tensor};

pub const INPUT: usize = 45;
pub const WIDTHS: [usize; 5] = [400, 45, 200, 45, 200];
pub const SH_OUT: usize = 45;
pub const FRACTION_OUT: usize = 3;

/// Layer index of the SH head; the fraction head follows it.
const SH_HEAD: usize = 5;
const FRACTION_HEAD: usize = 6;

fn fan_in(layer: usize) -> usize {
    match layer {
        0 => INPUT,
        3 => WIDTHS[2],
        // x5 consumes x2 + x4
        4 => WIDTHS[1],
        5 | 6 => WIDTHS[4],
        l => WIDTHS[l - 1],
    }
}

fn fan_out(layer: usize) -> usize {
    match layer {
        SH_HEAD => SH_OUT,
        FRACTION_HEAD => FRACTION_OUT,
        l => WIDTHS[l],
    }
}

fn layer_name(layer: usize) -> alloc::string::String {
    match layer {
        SH_HEAD => "sh_head".into(),
        FRACTION_HEAD => "fraction_head".into(),
        l => format!("x{}", l + 1),
    }
}

/// Seven dense layers, weight `[out, in]` then bias `[out]` each.
pub fn init(seed: u64) -> ParameterStore {
    let mut store = ParameterStore::new();
    for layer in 0..7 {
        let (o, i) = (fan_out(layer), fan_in(layer));
        let name = layer_name(layer);
        let gain = if layer >= SH_HEAD { super::HEAD_INIT_GAIN } else { 1.0 };
        store.add(&format!("{name}.weight"), scaled_he_uniform(&[o, i], i, gain, seed, layer as u64));
        store.add(&format!("{name}.bias"), Tensor::zeros(&[o]));
    }
    store
}

/// Expected `(name, shape)` of every parameter, slot order.
pub fn layout() -> Vec<(alloc::string::String, Vec<usize>)> {
    (0..7)
        .flat_map(|layer| {
            let name = layer_name(layer);
            let (o, i) = (fan_out(layer), fan_in(layer));
            [(format!("{name}.weight"), vec![o, i]), (format!("{name}.bias"), vec![o])]
        })
        .collect()
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone, Default)]
pub struct Cache {
    x: Vec<f64>,
    pre: [Vec<f64>; 5],
    post: [Vec<f64>; 5],
    skip: Vec<f64>,
    pub sh: Vec<f64>,
    pub fractions: [f64; 3],
}

impl Cache {
    /// Fingerprint of the ReLU on/off pattern.
    pub fn region(&self) -> u64 {
        super::activation_region(self.pre.iter().map(|v| v.as_slice()))
    }
}

fn w(p: &ParameterStore, layer: usize) -> &[f64] {
    p.value(2 * layer).data()
}

fn b(p: &ParameterStore, layer: usize) -> &[f64] {
    p.value(2 * layer + 1).data()
}

/// Input of dense layer `layer` in the cache.
fn layer_input(c: &Cache, layer: usize) -> &[f64] {
    match layer {
        0 => &c.x,
        4 => &c.skip,
        5 | 6 => &c.post[4],
        l => &c.post[l - 1],
    }
}

pub fn forward(p: &ParameterStore, x: &[f64], c: &mut Cache) {
    c.x.clear();
    c.x.extend_from_slice(x);
    c.pre[0].resize(WIDTHS[0], 0.0);
    dense_raw(&c.x, w(p, 0), b(p, 0), &mut c.pre[0]);
    propagate(p, c, 0);
}

/// Recomputes everything downstream of the pre-activation of `from`.
/// `from` in 5..=6 means one head changed; nothing else depends on it.
fn propagate(p: &ParameterStore, c: &mut Cache, from: usize) {
    if from >= SH_HEAD {
        return;
    }
    for layer in from..5 {
        if layer > from {
            let mut pre = core::mem::take(&mut c.pre[layer]);
            pre.resize(WIDTHS[layer], 0.0);
            dense_raw(layer_input(c, layer), w(p, layer), b(p, layer), &mut pre);
            c.pre[layer] = pre;
        }
        let mut post = core::mem::take(&mut c.post[layer]);
        post.clear();
        post.extend(c.pre[layer].iter().map(|v| v.max(0.0)));
        c.post[layer] = post;
        if layer == 3 {
            c.skip.clear();
            c.skip.extend(c.post[1].iter().zip(&c.post[3]).map(|(a, b)| a + b));
        }
    }
    c.sh.resize(SH_OUT, 0.0);
    let mut sh = core::mem::take(&mut c.sh);
    dense_raw(&c.post[4], w(p, SH_HEAD), b(p, SH_HEAD), &mut sh);
    c.sh = sh;
    let mut fr = [0.0; 3];
    dense_raw(&c.post[4], w(p, FRACTION_HEAD), b(p, FRACTION_HEAD), &mut fr);
    c.fractions = fr;
}

/// Accumulates parameter gradients for upstream output gradients.
pub fn backward(p: &ParameterStore, c: &Cache, d_sh: &[f64], d_fractions: &[f64; 3], g: &mut Gradients) {
    let mut d_post: [Vec<f64>; 5] = Default::default();
    for (l, d) in d_post.iter_mut().enumerate() {
        *d = vec![0.0; WIDTHS[l]];
    }
    let mut tmp = vec![0.0; WIDTHS[4]];
    head_grad(p, c, SH_HEAD, d_sh, &mut d_post[4], g);
    head_grad(p, c, FRACTION_HEAD, d_fractions, &mut tmp, g);
    for (a, t) in d_post[4].iter_mut().zip(&tmp) {
        *a += t;
    }
    let mut d_skip = vec![0.0; WIDTHS[1]];
    for layer in (0..5).rev() {
        let mut d_pre = core::mem::take(&mut d_post[layer]);
        relu_grad_raw(&c.pre[layer], &mut d_pre);
        let (dw, db) = grad_pair(g, layer);
        match layer {
            0 => dense_grad_raw(&c.x, w(p, 0), &d_pre, None, dw, db),
            4 => dense_grad_raw(&c.skip, w(p, 4), &d_pre, Some(&mut d_skip), dw, db),
            l => {
                let mut d_in = vec![0.0; fan_in(l)];
                dense_grad_raw(layer_input(c, l), w(p, l), &d_pre, Some(&mut d_in), dw, db);
                d_post[l - 1] = d_in;
            }
        }
        // the skip sum feeds both x2 and x4
        if layer == 4 {
            d_post[3] = d_skip.clone();
        }
        if layer == 2 {
            for (a, s) in d_post[1].iter_mut().zip(&d_skip) {
                *a += s;
            }
        }
    }
}

fn head_grad(p: &ParameterStore, c: &Cache, layer: usize, dy: &[f64], dx: &mut [f64], g: &mut Gradients) {
    let (dw, db) = grad_pair(g, layer);
    dense_grad_raw(&c.post[4], w(p, layer), dy, Some(dx), dw, db);
}

fn grad_pair(g: &mut Gradients, layer: usize) -> (&mut [f64], &mut [f64]) {
    g.slot_pair_mut(2 * layer, 2 * layer + 1)
}

/// Outputs with a single coordinate changed, reusing `base` activations from
/// an unperturbed forward pass with the same parameters.
pub fn perturbed(p: &ParameterStore, base: &Cache, slot: usize, index: usize, value: f64) -> Cache {
    let mut c = base.clone();
    let layer = slot / 2;
    let old = p.value(slot).data()[index];
    let (unit, delta) = if slot.is_multiple_of(2) {
        let n_in = fan_in(layer);
        (index / n_in, (value - old) * layer_input(base, layer)[index % n_in])
    } else {
        (index, value - old)
    };
    match layer {
        SH_HEAD => c.sh[unit] += delta,
        FRACTION_HEAD => c.fractions[unit] += delta,
        l => {
            c.pre[l][unit] += delta;
            propagate(p, &mut c, l);
        }
    }
    c
}
