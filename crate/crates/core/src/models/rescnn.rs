//! Convolutional residual network on 3×3×3 neighbourhoods of SH vectors.
//!
//! The 45 input channels are split by SH order into groups of 1, 5, 9, 13
//! and 17 channels. The residual block applies two ReLU-activated same-padded
//! 3×3×3 convolutions to each group independently and adds the block input
//! back, so the block output keeps the sign of the input SH.
//! A valid 3×3×3 convolution then collapses the patch to 128 features, a
//! 1×1×1 convolution maps them to 64, and two linear heads predict the
//! centre voxel's SH coefficients and tissue fractions.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::nn::{
    conv3d_grad_raw, conv3d_raw, dense_grad_raw, dense_raw, relu_grad_raw, scaled_he_uniform, Conv3dShape, Gradients,
    Padding, ParameterStore, Tensor,
};

pub const CHANNELS: usize = 45;
pub const PATCH: usize = 3;
pub const POSITIONS: usize = PATCH * PATCH * PATCH;
pub const INPUT: usize = POSITIONS * CHANNELS;
/// Channels per SH order group (orders 0, 2, 4, 6, 8).
pub const GROUPS: [usize; 5] = [1, 5, 9, 13, 17];
const GROUP_OFFSETS: [usize; 5] = [0, 1, 6, 15, 28];
pub const COLLAPSE_CHANNELS: usize = 128;
pub const HIDDEN_CHANNELS: usize = 64;
pub const SH_OUT: usize = 45;
pub const FRACTION_OUT: usize = 3;

const CONV3: usize = 20;
const CONV4: usize = 22;
const SH_HEAD: usize = 24;
const FRACTION_HEAD: usize = 26;

fn group_shape(g: usize) -> Conv3dShape {
    Conv3dShape {
        input: [PATCH; 3],
        kernel: 3,
        in_channels: GROUPS[g],
        out_channels: GROUPS[g],
        padding: Padding::Same,
    }
}

const COLLAPSE: Conv3dShape = Conv3dShape {
    input: [PATCH; 3],
    kernel: 3,
    in_channels: CHANNELS,
    out_channels: COLLAPSE_CHANNELS,
    padding: Padding::Valid,
};

const POINTWISE: Conv3dShape = Conv3dShape {
    input: [1; 3],
    kernel: 1,
    in_channels: COLLAPSE_CHANNELS,
    out_channels: HIDDEN_CHANNELS,
    padding: Padding::Valid,
};

/// `(name, weight shape, fan_in)` per layer; a bias of the output width follows each weight.
fn layers() -> Vec<(String, Vec<usize>, usize)> {
    let mut out = Vec::new();
    for block in 1..=2 {
        for (g, &n) in GROUPS.iter().enumerate() {
            out.push((format!("block.conv{block}.l{}", 2 * g), vec![3, 3, 3, n, n], POSITIONS * n));
        }
    }
    out.push(("collapse".into(), vec![3, 3, 3, CHANNELS, COLLAPSE_CHANNELS], POSITIONS * CHANNELS));
    out.push(("pointwise".into(), vec![1, 1, 1, COLLAPSE_CHANNELS, HIDDEN_CHANNELS], COLLAPSE_CHANNELS));
    out.push(("sh_head".into(), vec![SH_OUT, HIDDEN_CHANNELS], HIDDEN_CHANNELS));
    out.push(("fraction_head".into(), vec![FRACTION_OUT, HIDDEN_CHANNELS], HIDDEN_CHANNELS));
    out
}

fn bias_len(shape: &[usize]) -> usize {
    if shape.len() == 5 {
        shape[4]
    } else {
        shape[0]
    }
}

pub fn init(seed: u64) -> ParameterStore {
    let mut store = ParameterStore::new();
    for (i, (name, shape, fan_in)) in layers().into_iter().enumerate() {
        let gain = if name.ends_with("_head") { super::HEAD_INIT_GAIN } else { 1.0 };
        store.add(&format!("{name}.weight"), scaled_he_uniform(&shape, fan_in, gain, seed, i as u64));
        store.add(&format!("{name}.bias"), Tensor::zeros(&[bias_len(&shape)]));
    }
    store
}

pub fn layout() -> Vec<(String, Vec<usize>)> {
    layers()
        .into_iter()
        .flat_map(|(name, shape, _)| {
            let b = bias_len(&shape);
            [(format!("{name}.weight"), shape), (format!("{name}.bias"), vec![b])]
        })
        .collect()
}

#[derive(Debug, Clone, Default)]
pub struct Cache {
    x: Vec<f64>,
    xg: [Vec<f64>; 5],
    a1: [Vec<f64>; 5],
    h1: [Vec<f64>; 5],
    a2: [Vec<f64>; 5],
    h2: [Vec<f64>; 5],
    z: Vec<f64>,
    a3: Vec<f64>,
    h3: Vec<f64>,
    a4: Vec<f64>,
    h4: Vec<f64>,
    pub sh: Vec<f64>,
    pub fractions: [f64; 3],
}

impl Cache {
    /// Fingerprint of the ReLU on/off pattern.
    pub fn region(&self) -> u64 {
        let parts = self.a1.iter().chain(&self.a2).map(|v| v.as_slice());
        super::activation_region(parts.chain([self.a3.as_slice(), &self.a4]))
    }
}

fn val(p: &ParameterStore, slot: usize) -> &[f64] {
    p.value(slot).data()
}

fn conv1_slot(g: usize) -> usize {
    2 * g
}

fn conv2_slot(g: usize) -> usize {
    10 + 2 * g
}

fn gather(src: &[f64], g: usize, dst: &mut Vec<f64>) {
    let (o, n) = (GROUP_OFFSETS[g], GROUPS[g]);
    dst.clear();
    for pos in 0..POSITIONS {
        dst.extend_from_slice(&src[pos * CHANNELS + o..pos * CHANNELS + o + n]);
    }
}

fn relu_into(src: &[f64], dst: &mut Vec<f64>) {
    dst.clear();
    dst.extend(src.iter().map(|v| v.max(0.0)));
}

fn conv(shape: &Conv3dShape, x: &[f64], k: &[f64], b: &[f64], out: &mut Vec<f64>) {
    let n: usize = shape.output().iter().product::<usize>() * shape.out_channels;
    out.resize(n, 0.0);
    conv3d_raw(shape, x, k, Some(b), out);
}

pub fn forward(p: &ParameterStore, x: &[f64], c: &mut Cache) {
    c.x.clear();
    c.x.extend_from_slice(x);
    c.z.resize(INPUT, 0.0);
    for g in 0..5 {
        let mut xg = core::mem::take(&mut c.xg[g]);
        gather(&c.x, g, &mut xg);
        c.xg[g] = xg;
        let shape = group_shape(g);
        conv(&shape, &c.xg[g], val(p, conv1_slot(g)), val(p, conv1_slot(g) + 1), &mut c.a1[g]);
        let mut h1 = core::mem::take(&mut c.h1[g]);
        relu_into(&c.a1[g], &mut h1);
        c.h1[g] = h1;
        conv(&shape, &c.h1[g], val(p, conv2_slot(g)), val(p, conv2_slot(g) + 1), &mut c.a2[g]);
        let mut h2 = core::mem::take(&mut c.h2[g]);
        relu_into(&c.a2[g], &mut h2);
        c.h2[g] = h2;
        scatter_skip(c, g);
    }
    conv(&COLLAPSE, &c.z, val(p, CONV3), val(p, CONV3 + 1), &mut c.a3);
    tail(p, c, false);
}

/// `z = relu(a2) + x` on the channels of group `g`.
fn scatter_skip(c: &mut Cache, g: usize) {
    let (o, n) = (GROUP_OFFSETS[g], GROUPS[g]);
    for pos in 0..POSITIONS {
        for j in 0..n {
            let idx = pos * CHANNELS + o + j;
            c.z[idx] = c.h2[g][pos * n + j] + c.x[idx];
        }
    }
}

/// Everything after the collapse pre-activation (or, with `from_a4`, after
/// the pointwise pre-activation).
fn tail(p: &ParameterStore, c: &mut Cache, from_a4: bool) {
    if !from_a4 {
        relu_into(&c.a3, &mut c.h3);
        conv(&POINTWISE, &c.h3, val(p, CONV4), val(p, CONV4 + 1), &mut c.a4);
    }
    relu_into(&c.a4, &mut c.h4);
    c.sh.resize(SH_OUT, 0.0);
    dense_raw(&c.h4, val(p, SH_HEAD), val(p, SH_HEAD + 1), &mut c.sh);
    let mut fr = [0.0; 3];
    dense_raw(&c.h4, val(p, FRACTION_HEAD), val(p, FRACTION_HEAD + 1), &mut fr);
    c.fractions = fr;
}

pub fn backward(p: &ParameterStore, c: &Cache, d_sh: &[f64], d_fractions: &[f64; 3], g: &mut Gradients) {
    let mut d_h4 = vec![0.0; HIDDEN_CHANNELS];
    let mut tmp = vec![0.0; HIDDEN_CHANNELS];
    {
        let (dw, db) = g.slot_pair_mut(SH_HEAD, SH_HEAD + 1);
        dense_grad_raw(&c.h4, val(p, SH_HEAD), d_sh, Some(&mut d_h4), dw, db);
    }
    {
        let (dw, db) = g.slot_pair_mut(FRACTION_HEAD, FRACTION_HEAD + 1);
        dense_grad_raw(&c.h4, val(p, FRACTION_HEAD), d_fractions, Some(&mut tmp), dw, db);
    }
    for (a, t) in d_h4.iter_mut().zip(&tmp) {
        *a += t;
    }
    relu_grad_raw(&c.a4, &mut d_h4);
    let mut d_h3 = vec![0.0; COLLAPSE_CHANNELS];
    {
        let (dk, db) = g.slot_pair_mut(CONV4, CONV4 + 1);
        conv3d_grad_raw(&POINTWISE, &c.h3, val(p, CONV4), &d_h4, Some(&mut d_h3), dk, Some(db));
    }
    relu_grad_raw(&c.a3, &mut d_h3);
    let mut d_z = vec![0.0; INPUT];
    {
        let (dk, db) = g.slot_pair_mut(CONV3, CONV3 + 1);
        conv3d_grad_raw(&COLLAPSE, &c.z, val(p, CONV3), &d_h3, Some(&mut d_z), dk, Some(db));
    }
    let mut d_a2 = Vec::new();
    for grp in 0..5 {
        let shape = group_shape(grp);
        gather(&d_z, grp, &mut d_a2);
        relu_grad_raw(&c.a2[grp], &mut d_a2);
        let mut d_h1 = vec![0.0; d_a2.len()];
        {
            let (dk, db) = g.slot_pair_mut(conv2_slot(grp), conv2_slot(grp) + 1);
            conv3d_grad_raw(&shape, &c.h1[grp], val(p, conv2_slot(grp)), &d_a2, Some(&mut d_h1), dk, Some(db));
        }
        relu_grad_raw(&c.a1[grp], &mut d_h1);
        let (dk, db) = g.slot_pair_mut(conv1_slot(grp), conv1_slot(grp) + 1);
        conv3d_grad_raw(&shape, &c.xg[grp], val(p, conv1_slot(grp)), &d_h1, None, dk, Some(db));
    }
}

/// Outputs with a single coordinate changed, reusing `base` activations from
/// an unperturbed forward pass with the same parameters.
pub fn perturbed(p: &ParameterStore, base: &Cache, slot: usize, index: usize, value: f64) -> Cache {
    let mut c = base.clone();
    let old = val(p, slot)[index];
    let delta = value - old;
    match slot {
        0..=19 => {
            let first_block = slot < 10;
            let grp = (slot % 10) / 2;
            let shape = group_shape(grp);
            let mut k = val(p, slot - slot % 2).to_vec();
            let mut b = val(p, slot - slot % 2 + 1).to_vec();
            if slot.is_multiple_of(2) {
                k[index] = value;
            } else {
                b[index] = value;
            }
            if first_block {
                conv(&shape, &c.xg[grp], &k, &b, &mut c.a1[grp]);
                let mut h1 = core::mem::take(&mut c.h1[grp]);
                relu_into(&c.a1[grp], &mut h1);
                c.h1[grp] = h1;
                let s2 = conv2_slot(grp);
                conv(&shape, &c.h1[grp], val(p, s2), val(p, s2 + 1), &mut c.a2[grp]);
            } else {
                conv(&shape, &c.h1[grp], &k, &b, &mut c.a2[grp]);
            }
            let mut h2 = core::mem::take(&mut c.h2[grp]);
            relu_into(&c.a2[grp], &mut h2);
            c.h2[grp] = h2;
            // only this group's channels of z moved; update a3 incrementally
            let (o, n) = (GROUP_OFFSETS[grp], GROUPS[grp]);
            let k3 = val(p, CONV3);
            for pos in 0..POSITIONS {
                for j in 0..n {
                    let idx = pos * CHANNELS + o + j;
                    let z_new = c.h2[grp][pos * n + j] + c.x[idx];
                    let dz = z_new - c.z[idx];
                    c.z[idx] = z_new;
                    if dz != 0.0 {
                        let row = &k3[idx * COLLAPSE_CHANNELS..(idx + 1) * COLLAPSE_CHANNELS];
                        for (a, kv) in c.a3.iter_mut().zip(row) {
                            *a += dz * kv;
                        }
                    }
                }
            }
            tail(p, &mut c, false);
        }
        CONV3 => {
            c.a3[index % COLLAPSE_CHANNELS] += delta * base.z[index / COLLAPSE_CHANNELS];
            tail(p, &mut c, false);
        }
        s if s == CONV3 + 1 => {
            c.a3[index] += delta;
            tail(p, &mut c, false);
        }
        CONV4 => {
            c.a4[index % HIDDEN_CHANNELS] += delta * base.h3[index / HIDDEN_CHANNELS];
            tail(p, &mut c, true);
        }
        s if s == CONV4 + 1 => {
            c.a4[index] += delta;
            tail(p, &mut c, true);
        }
        SH_HEAD => c.sh[index / HIDDEN_CHANNELS] += delta * base.h4[index % HIDDEN_CHANNELS],
        s if s == SH_HEAD + 1 => c.sh[index] += delta,
        FRACTION_HEAD => c.fractions[index / HIDDEN_CHANNELS] += delta * base.h4[index % HIDDEN_CHANNELS],
        _ => c.fractions[index] += delta,
    }
    c
}
