//! Analytical per-layer cost features.
//!
//! For every convolution layer the memory footprint and operation count of
//! the three common convolution algorithms (im2col + matrix multiplication,
//! FFT, Winograd) are modelled for the forward pass (`fwd`), the gradient
//! with respect to the input (`bwd_x`) and the gradient with respect to the
//! weights (`bwd_w`), together with the algorithm-independent tensor sizes
//! and a set of summations. The per-layer values are summed over the layers
//! of a network to give one 42-entry vector per (network, batch size).
//!
//! Values are element and multiply-accumulate counts, never bytes. All of
//! them are affine in the batch size.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::{ConvLayerSpec, NetworkSpec};
use crate::scalar::FeatureScalar;

/// Version of the feature definitions; stored in model files so a forest is
/// only applied to vectors it was trained on.
pub const FEATURE_VERSION: &str = "convfeat-v1";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FeatureError {
    #[error("batch size must be >= 1")]
    BatchSize,
    #[error("csv export failed: {0}")]
    Csv(String),
}

/// Which computation a feature models.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Pass {
    Fwd,
    BwdX,
    BwdW,
    Mixed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FeatureMode {
    Training,
    /// Forward-pass features only.
    InferenceOnly,
}

/// How the two Winograd tile configurations are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum WinogradLayout {
    /// One column per Winograd feature holding the sum over both tile
    /// configurations (42 features in total).
    #[default]
    Summed,
    /// One column per tile configuration (56 features in total).
    Split,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct FeatureDef {
    pub name: &'static str,
    pub pass: Pass,
    pub winograd: bool,
}

const fn def(name: &'static str, pass: Pass) -> FeatureDef {
    FeatureDef { name, pass, winograd: false }
}

const fn wino(name: &'static str, pass: Pass) -> FeatureDef {
    FeatureDef { name, pass, winograd: true }
}

/// Canonical feature order.
pub const FEATURES: [FeatureDef; 42] = [
    // tensor allocations
    def("mem_w", Pass::Fwd),
    def("mem_w_grad", Pass::BwdW),
    // equal to the forward IFM / OFM activation sizes
    def("mem_ifm_grad", Pass::Fwd),
    def("mem_ofm_grad", Pass::Fwd),
    def("mem_tensors_sum", Pass::Mixed),
    // im2col + matmul
    def("mm_mem_i2c_fwd_total", Pass::Fwd),
    def("mm_mem_i2c_bwd_w_total", Pass::BwdW),
    def("mm_mem_i2c_fwd_index", Pass::Fwd),
    def("mm_mem_i2c_bwd_x_total", Pass::BwdX),
    def("mm_mem_i2c_bwd_x_index", Pass::BwdX),
    def("mm_mem_i2c_total_sum", Pass::Mixed),
    def("mm_mem_i2c_index_sum", Pass::Mixed),
    def("mm_ops_fwd", Pass::Fwd),
    def("mm_ops_bwd_x", Pass::BwdX),
    def("mm_ops_sum", Pass::Mixed),
    // FFT
    def("fft_mem_w_fwd", Pass::Fwd),
    def("fft_mem_ifm_fwd", Pass::Fwd),
    def("fft_mem_ofm_bwd_w", Pass::BwdW),
    def("fft_mem_w_bwd_x", Pass::BwdX),
    def("fft_mem_ofm_bwd_x", Pass::BwdX),
    def("fft_mem_w_ifm_fwd_sum", Pass::Mixed),
    def("fft_mem_ofm_bwd_sum", Pass::Mixed),
    def("fft_mem_ofm_bwd_w_ifm_fwd_sum", Pass::Mixed),
    def("fft_mem_sum", Pass::Mixed),
    def("fft_ops_fwd", Pass::Fwd),
    def("fft_ops_bwd_x", Pass::BwdX),
    def("fft_ops_bwd_w", Pass::BwdW),
    def("fft_ops_sum", Pass::Mixed),
    // Winograd
    wino("wino_mem_fwd", Pass::Fwd),
    wino("wino_mem_bwd_x", Pass::BwdX),
    wino("wino_mem_bwd_w", Pass::BwdW),
    wino("wino_mem_fwd_bwd_x_sum", Pass::Mixed),
    wino("wino_mem_fwd_bwd_w_sum", Pass::Mixed),
    wino("wino_mem_bwd_w_bwd_x_sum", Pass::Mixed),
    wino("wino_mem_sum", Pass::Mixed),
    wino("wino_ops_fwd", Pass::Fwd),
    wino("wino_ops_bwd_x", Pass::BwdX),
    wino("wino_ops_bwd_w", Pass::BwdW),
    wino("wino_ops_fwd_bwd_x_sum", Pass::Mixed),
    wino("wino_ops_fwd_bwd_w_sum", Pass::Mixed),
    wino("wino_ops_bwd_x_bwd_w_sum", Pass::Mixed),
    wino("wino_ops_sum", Pass::Mixed),
];

/// Winograd `F(q×q, r×r)` tile configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WinogradTile {
    pub q: u32,
    pub r: u32,
}

impl WinogradTile {
    pub const F4X3: WinogradTile = WinogradTile { q: 4, r: 3 };
    pub const F3X2: WinogradTile = WinogradTile { q: 3, r: 2 };
    /// The two configurations evaluated for every layer.
    pub const MODELLED: [WinogradTile; 2] = [Self::F4X3, Self::F3X2];

    fn suffix(&self) -> String {
        format!("q{}r{}", self.q, self.r)
    }
}

/// Layout of a feature vector: which features, in which order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub mode: FeatureMode,
    pub layout: WinogradLayout,
}

impl FeatureSchema {
    pub const TRAINING: FeatureSchema = FeatureSchema { mode: FeatureMode::Training, layout: WinogradLayout::Summed };
    pub const INFERENCE: FeatureSchema =
        FeatureSchema { mode: FeatureMode::InferenceOnly, layout: WinogradLayout::Summed };

    fn keeps(&self, def: &FeatureDef) -> bool {
        self.mode == FeatureMode::Training || def.pass == Pass::Fwd
    }

    /// Feature names in vector order.
    pub fn names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for d in FEATURES.iter().filter(|d| !d.winograd && self.keeps(d)) {
            names.push(d.name.to_string());
        }
        let wino = FEATURES.iter().filter(|d| d.winograd && self.keeps(d));
        match self.layout {
            WinogradLayout::Summed => names.extend(wino.map(|d| d.name.to_string())),
            WinogradLayout::Split => {
                for tile in WinogradTile::MODELLED {
                    names.extend(wino.clone().map(|d| format!("{}_{}", d.name, tile.suffix())));
                }
            }
        }
        names
    }

    pub fn len(&self) -> usize {
        self.names().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Tag identifying feature definitions and layout, e.g. `convfeat-v1/training/summed`.
    pub fn tag(&self) -> String {
        let mode = match self.mode {
            FeatureMode::Training => "training",
            FeatureMode::InferenceOnly => "inference",
        };
        let layout = match self.layout {
            WinogradLayout::Summed => "summed",
            WinogradLayout::Split => "split",
        };
        format!("{FEATURE_VERSION}/{mode}/{layout}")
    }
}

impl Default for FeatureSchema {
    fn default() -> Self {
        Self::TRAINING
    }
}

fn sq(x: u128) -> u128 {
    x * x
}

fn ceil_div(a: u128, b: u128) -> u128 {
    a.div_ceil(b)
}

struct Dims {
    bs: u128,
    n: u128,
    m: u128,
    m_per_group: u128,
    k: u128,
    ip: u128,
    op: u128,
}

impl Dims {
    fn of(layer: &ConvLayerSpec, bs: u32) -> Self {
        Self {
            bs: bs as u128,
            n: layer.n as u128,
            m: layer.m as u128,
            m_per_group: (layer.m / layer.g) as u128,
            k: layer.k as u128,
            ip: layer.ip as u128,
            op: layer.ofm_size() as u128,
        }
    }
}

/// Algorithm-independent tensor sizes.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorFeatures<T> {
    pub mem_w: T,
    pub mem_w_grad: T,
    pub mem_ifm_grad: T,
    pub mem_ofm_grad: T,
    pub sum: T,
}

impl<T: FeatureScalar> TensorFeatures<T> {
    pub fn values(&self) -> Vec<T> {
        vec![
            self.mem_w.clone(),
            self.mem_w_grad.clone(),
            self.mem_ifm_grad.clone(),
            self.mem_ofm_grad.clone(),
            self.sum.clone(),
        ]
    }
}

pub fn layer_tensor_features<T: FeatureScalar>(layer: &ConvLayerSpec, bs: u32) -> TensorFeatures<T> {
    let d = Dims::of(layer, bs);
    let mem_w = d.n * d.m_per_group * sq(d.k);
    let mem_w_grad = d.bs * mem_w;
    let mem_ifm_grad = d.bs * d.m * sq(d.ip);
    let mem_ofm_grad = d.bs * d.n * sq(d.op);
    TensorFeatures {
        mem_w: T::from_count(mem_w),
        mem_w_grad: T::from_count(mem_w_grad),
        mem_ifm_grad: T::from_count(mem_ifm_grad),
        mem_ofm_grad: T::from_count(mem_ofm_grad),
        sum: T::from_count(mem_w + mem_w_grad + mem_ifm_grad + mem_ofm_grad),
    }
}

/// im2col lowering followed by matrix multiplication.
#[derive(Clone, Debug, PartialEq)]
pub struct MatmulFeatures<T> {
    pub mem_i2c_fwd_total: T,
    pub mem_i2c_bwd_w_total: T,
    /// Window-start indices; identical for the weight-gradient pass.
    pub mem_i2c_fwd_index: T,
    pub mem_i2c_bwd_x_total: T,
    pub mem_i2c_bwd_x_index: T,
    pub mem_i2c_total_sum: T,
    pub mem_i2c_index_sum: T,
    /// Identical for the weight-gradient pass.
    pub ops_fwd: T,
    pub ops_bwd_x: T,
    pub ops_sum: T,
}

impl<T: FeatureScalar> MatmulFeatures<T> {
    pub fn values(&self) -> Vec<T> {
        vec![
            self.mem_i2c_fwd_total.clone(),
            self.mem_i2c_bwd_w_total.clone(),
            self.mem_i2c_fwd_index.clone(),
            self.mem_i2c_bwd_x_total.clone(),
            self.mem_i2c_bwd_x_index.clone(),
            self.mem_i2c_total_sum.clone(),
            self.mem_i2c_index_sum.clone(),
            self.ops_fwd.clone(),
            self.ops_bwd_x.clone(),
            self.ops_sum.clone(),
        ]
    }
}

pub fn layer_matmul_features<T: FeatureScalar>(layer: &ConvLayerSpec, bs: u32) -> MatmulFeatures<T> {
    let d = Dims::of(layer, bs);
    let fwd_total = d.bs * sq(d.op) * sq(d.k) * d.m;
    let bwd_w_total = d.bs * sq(d.op) * sq(d.k) * d.m_per_group;
    let fwd_index = d.bs * sq(d.op);
    let bwd_x_total = d.bs * sq(d.ip) * sq(d.k) * d.m;
    let bwd_x_index = d.bs * sq(d.ip);
    let ops_fwd = d.bs * d.n * sq(d.op) * sq(d.k) * d.m_per_group;
    let ops_bwd_x = d.bs * d.m * sq(d.ip) * sq(d.k) * d.n;
    MatmulFeatures {
        mem_i2c_fwd_total: T::from_count(fwd_total),
        mem_i2c_bwd_w_total: T::from_count(bwd_w_total),
        mem_i2c_fwd_index: T::from_count(fwd_index),
        mem_i2c_bwd_x_total: T::from_count(bwd_x_total),
        mem_i2c_bwd_x_index: T::from_count(bwd_x_index),
        mem_i2c_total_sum: T::from_count(fwd_total + bwd_w_total + bwd_x_total),
        mem_i2c_index_sum: T::from_count(2 * fwd_index + bwd_x_index),
        ops_fwd: T::from_count(ops_fwd),
        ops_bwd_x: T::from_count(ops_bwd_x),
        ops_sum: T::from_count(2 * ops_fwd + ops_bwd_x),
    }
}

/// Frequency-domain convolution. Logarithms are base 2.
#[derive(Clone, Debug, PartialEq)]
pub struct FftFeatures<T> {
    pub mem_w_fwd: T,
    /// Identical for the weight-gradient pass.
    pub mem_ifm_fwd: T,
    pub mem_ofm_bwd_w: T,
    pub mem_w_bwd_x: T,
    pub mem_ofm_bwd_x: T,
    pub mem_w_ifm_fwd_sum: T,
    pub mem_ofm_bwd_sum: T,
    pub mem_ofm_bwd_w_ifm_fwd_sum: T,
    pub mem_sum: T,
    pub ops_fwd: T,
    pub ops_bwd_x: T,
    pub ops_bwd_w: T,
    pub ops_sum: T,
}

impl<T: FeatureScalar> FftFeatures<T> {
    pub fn values(&self) -> Vec<T> {
        vec![
            self.mem_w_fwd.clone(),
            self.mem_ifm_fwd.clone(),
            self.mem_ofm_bwd_w.clone(),
            self.mem_w_bwd_x.clone(),
            self.mem_ofm_bwd_x.clone(),
            self.mem_w_ifm_fwd_sum.clone(),
            self.mem_ofm_bwd_sum.clone(),
            self.mem_ofm_bwd_w_ifm_fwd_sum.clone(),
            self.mem_sum.clone(),
            self.ops_fwd.clone(),
            self.ops_bwd_x.clone(),
            self.ops_bwd_w.clone(),
            self.ops_sum.clone(),
        ]
    }
}

pub fn layer_fft_features<T: FeatureScalar>(layer: &ConvLayerSpec, bs: u32) -> FftFeatures<T> {
    let d = Dims::of(layer, bs);
    let mem_w_fwd = d.n * d.m_per_group * d.ip * (1 + d.ip);
    let mem_ifm_fwd = d.bs * d.m * d.ip * (1 + d.ip);
    let mem_ofm_bwd_w = d.bs * d.n * d.ip * (1 + d.ip);
    let mem_w_bwd_x = d.n * d.m_per_group * d.op * (1 + d.op);
    let mem_ofm_bwd_x = d.bs * d.n * d.op * (1 + d.op);
    let sum1 = mem_w_fwd + mem_ifm_fwd;
    let sum2 = mem_ofm_bwd_x + mem_ofm_bwd_w;
    let sum3 = mem_ofm_bwd_w + mem_ifm_fwd;

    // shared factor (bs·(m + n) + n·m/g) multiplying every log term
    let transforms = d.bs * (d.m + d.n) + d.n * d.m_per_group;
    let log_ip = T::log2_of(layer.ip as u64);
    let log_op = T::log2_of(layer.ofm_size() as u64);
    let ops_fwd = log_ip.scaled(sq(d.ip) * transforms) + T::from_count(d.bs * d.n * d.m * sq(d.ip));
    let ops_bwd_x = log_op.scaled(sq(d.op) * transforms) + T::from_count(d.bs * d.n * d.m * sq(d.op));
    // ip · log(ip²) = 2 · ip · log(ip)
    let ops_bwd_w = log_ip.scaled(2 * d.ip * transforms) + T::from_count(d.bs * d.n * d.m * sq(d.ip));
    let ops_sum = ops_fwd.clone() + ops_bwd_x.clone() + ops_bwd_w.clone();

    FftFeatures {
        mem_w_fwd: T::from_count(mem_w_fwd),
        mem_ifm_fwd: T::from_count(mem_ifm_fwd),
        mem_ofm_bwd_w: T::from_count(mem_ofm_bwd_w),
        mem_w_bwd_x: T::from_count(mem_w_bwd_x),
        mem_ofm_bwd_x: T::from_count(mem_ofm_bwd_x),
        mem_w_ifm_fwd_sum: T::from_count(sum1),
        mem_ofm_bwd_sum: T::from_count(sum2),
        mem_ofm_bwd_w_ifm_fwd_sum: T::from_count(sum3),
        mem_sum: T::from_count(sum1 + sum2 + sum3),
        ops_fwd,
        ops_bwd_x,
        ops_bwd_w,
        ops_sum,
    }
}

/// Winograd minimal filtering for one tile configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct WinogradFeatures<T> {
    pub mem_fwd: T,
    pub mem_bwd_x: T,
    pub mem_bwd_w: T,
    pub mem_fwd_bwd_x_sum: T,
    pub mem_fwd_bwd_w_sum: T,
    pub mem_bwd_w_bwd_x_sum: T,
    pub mem_sum: T,
    pub ops_fwd: T,
    pub ops_bwd_x: T,
    pub ops_bwd_w: T,
    pub ops_fwd_bwd_x_sum: T,
    pub ops_fwd_bwd_w_sum: T,
    pub ops_bwd_x_bwd_w_sum: T,
    pub ops_sum: T,
}

impl<T: FeatureScalar> WinogradFeatures<T> {
    pub fn values(&self) -> Vec<T> {
        vec![
            self.mem_fwd.clone(),
            self.mem_bwd_x.clone(),
            self.mem_bwd_w.clone(),
            self.mem_fwd_bwd_x_sum.clone(),
            self.mem_fwd_bwd_w_sum.clone(),
            self.mem_bwd_w_bwd_x_sum.clone(),
            self.mem_sum.clone(),
            self.ops_fwd.clone(),
            self.ops_bwd_x.clone(),
            self.ops_bwd_w.clone(),
            self.ops_fwd_bwd_x_sum.clone(),
            self.ops_fwd_bwd_w_sum.clone(),
            self.ops_bwd_x_bwd_w_sum.clone(),
            self.ops_sum.clone(),
        ]
    }
}

pub fn layer_winograd_features<T: FeatureScalar>(
    layer: &ConvLayerSpec,
    bs: u32,
    tile: WinogradTile,
) -> WinogradFeatures<T> {
    let d = Dims::of(layer, bs);
    let (q, r) = (tile.q as u128, tile.r as u128);
    // (q + r − 1)² multiplications per tile; LHS, RHS and product held at once
    let tile_elems = sq(q + r - 1);
    let ip_tiles = sq(ceil_div(d.ip, q));
    let op_tiles = sq(ceil_div(d.op, q));
    let k_tiles = sq(ceil_div(d.k, r));

    let mem_fwd = d.bs * d.n * ip_tiles * 3 * tile_elems;
    let mem_bwd_x = d.bs * d.m * op_tiles * 3 * tile_elems;
    let mem_bwd_w = d.bs * d.n * d.m_per_group * ip_tiles * 3 * tile_elems;
    let ops_fwd = d.bs * d.n * d.m_per_group * ip_tiles * k_tiles * tile_elems;
    let ops_bwd_x = d.bs * d.m * d.n * op_tiles * k_tiles * tile_elems;
    // the weight-gradient count tiles the OFM by r and squares m/g
    let ops_bwd_w = d.bs * d.n * sq(d.m_per_group) * ip_tiles * sq(ceil_div(d.op, r)) * tile_elems;

    let mem_s1 = mem_fwd + mem_bwd_x;
    let mem_s2 = mem_fwd + mem_bwd_w;
    let mem_s3 = mem_bwd_w + mem_bwd_x;
    let ops_s1 = ops_fwd + ops_bwd_x;
    let ops_s2 = ops_fwd + ops_bwd_w;
    let ops_s3 = ops_bwd_x + ops_bwd_w;
    let c = T::from_count;
    WinogradFeatures {
        mem_fwd: c(mem_fwd),
        mem_bwd_x: c(mem_bwd_x),
        mem_bwd_w: c(mem_bwd_w),
        mem_fwd_bwd_x_sum: c(mem_s1),
        mem_fwd_bwd_w_sum: c(mem_s2),
        mem_bwd_w_bwd_x_sum: c(mem_s3),
        mem_sum: c(mem_s1 + mem_s2 + mem_s3),
        ops_fwd: c(ops_fwd),
        ops_bwd_x: c(ops_bwd_x),
        ops_bwd_w: c(ops_bwd_w),
        ops_fwd_bwd_x_sum: c(ops_s1),
        ops_fwd_bwd_w_sum: c(ops_s2),
        ops_bwd_x_bwd_w_sum: c(ops_s3),
        ops_sum: c(ops_s1 + ops_s2 + ops_s3),
    }
}

/// All features of one layer in the order given by `schema`.
pub fn layer_features<T: FeatureScalar>(layer: &ConvLayerSpec, bs: u32, schema: FeatureSchema) -> Vec<T> {
    let mut plain = layer_tensor_features::<T>(layer, bs).values();
    plain.extend(layer_matmul_features::<T>(layer, bs).values());
    plain.extend(layer_fft_features::<T>(layer, bs).values());

    let wino_defs: Vec<&FeatureDef> = FEATURES.iter().filter(|d| d.winograd).collect();
    let per_tile: Vec<Vec<T>> = WinogradTile::MODELLED
        .iter()
        .map(|&tile| layer_winograd_features::<T>(layer, bs, tile).values())
        .collect();

    let mut out: Vec<T> = FEATURES
        .iter()
        .filter(|d| !d.winograd)
        .zip(plain)
        .filter(|(d, _)| schema.keeps(d))
        .map(|(_, v)| v)
        .collect();
    match schema.layout {
        WinogradLayout::Summed => {
            for (i, d) in wino_defs.iter().enumerate() {
                if schema.keeps(d) {
                    out.push(per_tile[0][i].clone() + per_tile[1][i].clone());
                }
            }
        }
        WinogradLayout::Split => {
            for values in &per_tile {
                for (i, d) in wino_defs.iter().enumerate() {
                    if schema.keeps(d) {
                        out.push(values[i].clone());
                    }
                }
            }
        }
    }
    out
}

/// Network-level feature vector for one batch size.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector<T> {
    schema: FeatureSchema,
    bs: u32,
    values: Vec<T>,
}

impl<T: FeatureScalar> FeatureVector<T> {
    pub fn zeros(schema: FeatureSchema, bs: u32) -> Self {
        Self { schema, bs, values: vec![T::zero(); schema.len()] }
    }

    pub fn schema(&self) -> FeatureSchema {
        self.schema
    }

    pub fn bs(&self) -> u32 {
        self.bs
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn names(&self) -> Vec<String> {
        self.schema.names()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&T> {
        self.schema.names().iter().position(|n| n == name).map(|i| &self.values[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (String, &T)> {
        self.schema.names().into_iter().zip(self.values.iter())
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(FeatureScalar::to_f64).collect()
    }

    /// Add one layer's features (as returned by [`layer_features`]).
    pub fn accumulate(&mut self, layer_values: Vec<T>) {
        assert_eq!(layer_values.len(), self.values.len(), "feature width mismatch");
        for (acc, v) in self.values.iter_mut().zip(layer_values) {
            *acc += v;
        }
    }
}

/// Sum per-layer features over every convolution of `net`, in layer order.
pub fn extract_features<T: FeatureScalar>(
    net: &NetworkSpec,
    bs: u32,
    schema: FeatureSchema,
) -> Result<FeatureVector<T>, FeatureError> {
    if bs == 0 {
        return Err(FeatureError::BatchSize);
    }
    let mut out = FeatureVector::zeros(schema, bs);
    for layer in net.conv_layers() {
        out.accumulate(layer_features(layer, bs, schema));
    }
    Ok(out)
}

/// Bytes per element assumed when reporting memory in megabytes.
pub const BYTES_PER_ELEMENT: f64 = 4.0;

/// Single-precision element count expressed in MiB. Reporting only; feature
/// vectors always hold raw counts.
pub fn elements_to_megabytes(elements: f64) -> f64 {
    elements * BYTES_PER_ELEMENT / (1024.0 * 1024.0)
}

/// Provenance columns accompanying an exported feature row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FeatureRowKey {
    pub network: String,
    pub pruning_level: u32,
    pub strategy: String,
    pub seed: u64,
}

impl fmt::Display for FeatureRowKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}%/{}/{}", self.network, self.pruning_level, self.strategy, self.seed)
    }
}

/// Write feature rows as CSV: the feature names followed by
/// `network,pruning_level,strategy,seed,bs`.
pub fn write_feature_csv<W: Write>(
    out: W,
    schema: FeatureSchema,
    rows: &[(FeatureRowKey, FeatureVector<f64>)],
) -> Result<(), FeatureError> {
    let err = |e: csv::Error| FeatureError::Csv(e.to_string());
    let mut w = csv::Writer::from_writer(out);
    let mut header = schema.names();
    header.extend(["network", "pruning_level", "strategy", "seed", "bs"].map(String::from));
    w.write_record(&header).map_err(err)?;
    for (key, fv) in rows {
        if fv.schema() != schema {
            return Err(FeatureError::Csv(format!("row {key} uses a different feature schema")));
        }
        let mut record: Vec<String> = fv.values().iter().map(|v| v.to_string()).collect();
        record.extend([
            key.network.clone(),
            key.pruning_level.to_string(),
            key.strategy.clone(),
            key.seed.to_string(),
            fv.bs().to_string(),
        ]);
        w.write_record(&record).map_err(err)?;
    }
    w.flush().map_err(|e| FeatureError::Csv(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::zoo;
    use crate::scalar::Exact;

    fn tiny() -> ConvLayerSpec {
        ConvLayerSpec::new("t", 1, 1, 2, 1, 0, 1, 4)
    }

    #[test]
    fn schema_sizes() {
        assert_eq!(FEATURES.len(), 42);
        assert_eq!(FeatureSchema::TRAINING.len(), 42);
        assert_eq!(FeatureSchema { mode: FeatureMode::Training, layout: WinogradLayout::Split }.len(), 56);
        let inference = FeatureSchema::INFERENCE.names();
        assert_eq!(inference.len(), 11);
        assert!(inference.iter().all(|n| !n.contains("bwd") && !n.ends_with("sum")));
        let names = FeatureSchema::TRAINING.names();
        let unique: std::collections::HashSet<_> = names.iter().collect();
        assert_eq!(unique.len(), 42);
    }

    #[test]
    fn tensor_features_tiny_layer() {
        let f = layer_tensor_features::<Exact>(&tiny(), 1);
        let counts: Vec<i128> = f.values().iter().map(|v| v.as_integer().unwrap()).collect();
        assert_eq!(counts, vec![4, 4, 16, 9, 33]);
    }

    #[test]
    fn tensor_features_stem() {
        let stem = ConvLayerSpec::new("c", 64, 3, 7, 2, 3, 1, 224);
        assert_eq!(layer_tensor_features::<f64>(&stem, 1).mem_w, 9408.0);
    }

    #[test]
    fn tensor_features_scale_with_bs() {
        let layer = ConvLayerSpec::new("c", 8, 4, 3, 2, 1, 2, 9);
        let a = layer_tensor_features::<f64>(&layer, 1);
        let b = layer_tensor_features::<f64>(&layer, 2);
        assert_eq!(b.mem_w, a.mem_w);
        assert_eq!(b.mem_w_grad, 2.0 * a.mem_w_grad);
        assert_eq!(b.mem_ifm_grad, 2.0 * a.mem_ifm_grad);
        assert_eq!(b.mem_ofm_grad, 2.0 * a.mem_ofm_grad);
    }

    #[test]
    fn matmul_features_examples() {
        let f = layer_matmul_features::<f64>(&tiny(), 1);
        assert_eq!(f.mem_i2c_fwd_total, 36.0);
        assert_eq!(f.ops_fwd, 36.0);
        assert_eq!(f.mem_i2c_fwd_index, 9.0);

        let pointwise = ConvLayerSpec::new("p", 16, 8, 1, 1, 0, 1, 10);
        let f = layer_matmul_features::<f64>(&pointwise, 3);
        assert_eq!(f.mem_i2c_fwd_total, (3 * 8 * 100) as f64);

        let grouped = ConvLayerSpec::new("g", 2, 4, 3, 1, 1, 2, 8);
        assert_eq!(layer_matmul_features::<f64>(&grouped, 2).ops_fwd, 4608.0);
    }

    #[test]
    fn fft_features_examples() {
        let f = layer_fft_features::<f64>(&tiny(), 1);
        assert_eq!(f.mem_w_fwd, 20.0);
        assert_eq!(f.mem_ifm_fwd, 20.0);
        assert_eq!(f.ops_fwd, 112.0);

        let unit = ConvLayerSpec::new("u", 3, 5, 1, 1, 0, 1, 1);
        assert_eq!(layer_fft_features::<f64>(&unit, 2).ops_fwd, (2 * 3 * 5) as f64);
        assert_eq!(layer_fft_features::<Exact>(&unit, 2).ops_fwd, Exact::integer(30));
    }

    #[test]
    fn fft_exact_matches_float() {
        let layer = ConvLayerSpec::new("c", 12, 6, 3, 1, 1, 3, 14);
        let exact = layer_fft_features::<Exact>(&layer, 5);
        let float = layer_fft_features::<f64>(&layer, 5);
        for (e, f) in exact.values().iter().zip(float.values()) {
            assert!((e.to_f64() - f).abs() <= 1e-9 * f.abs().max(1.0));
        }
        assert!(exact.ops_fwd.as_integer().is_none());
    }

    #[test]
    fn winograd_examples() {
        let layer = ConvLayerSpec::new("w", 1, 1, 3, 1, 1, 1, 4);
        let f43 = layer_winograd_features::<f64>(&layer, 1, WinogradTile::F4X3);
        assert_eq!(f43.mem_fwd, 108.0);
        assert_eq!(f43.ops_fwd, 36.0);
        let f32_ = layer_winograd_features::<f64>(&layer, 1, WinogradTile::F3X2);
        assert_eq!(f32_.mem_fwd, 192.0);
    }

    #[test]
    fn winograd_summed_layout_adds_tiles() {
        let layer = ConvLayerSpec::new("w", 6, 4, 3, 1, 1, 2, 12);
        let summed = layer_features::<f64>(&layer, 3, FeatureSchema::TRAINING);
        let split =
            layer_features::<f64>(&layer, 3, FeatureSchema { mode: FeatureMode::Training, layout: WinogradLayout::Split });
        assert_eq!(split.len(), 56);
        for i in 0..14 {
            assert_eq!(summed[28 + i], split[28 + i] + split[42 + i]);
        }
        assert_eq!(summed[..28], split[..28]);
    }

    #[test]
    fn summation_features_match_constituents() {
        let layer = ConvLayerSpec::new("c", 24, 16, 3, 2, 1, 4, 15);
        let v = layer_features::<Exact>(&layer, 7, FeatureSchema::TRAINING);
        let s = |i: &[usize]| i.iter().fold(Exact::default(), |acc, &j| acc + v[j].clone());
        assert_eq!(v[4], s(&[0, 1, 2, 3]));
        assert_eq!(v[10], s(&[5, 6, 8]));
        assert_eq!(v[11], s(&[7, 7, 9]));
        assert_eq!(v[14], s(&[12, 12, 13]));
        assert_eq!(v[20], s(&[15, 16]));
        assert_eq!(v[21], s(&[19, 17]));
        assert_eq!(v[22], s(&[17, 16]));
        assert_eq!(v[23], s(&[20, 21, 22]));
        assert_eq!(v[27], s(&[24, 25, 26]));
        assert_eq!(v[31], s(&[28, 29]));
        assert_eq!(v[32], s(&[28, 30]));
        assert_eq!(v[33], s(&[30, 29]));
        assert_eq!(v[34], s(&[31, 32, 33]));
        assert_eq!(v[38], s(&[35, 36]));
        assert_eq!(v[39], s(&[35, 37]));
        assert_eq!(v[40], s(&[36, 37]));
        assert_eq!(v[41], s(&[38, 39, 40]));
    }

    #[test]
    fn empty_network_is_zero() {
        let net = NetworkSpec::new("empty", crate::network::InputShape { channels: 3, spatial: 8 }, vec![], vec![]).unwrap();
        let fv = extract_features::<f64>(&net, 16, FeatureSchema::TRAINING).unwrap();
        assert_eq!(fv.len(), 42);
        assert!(fv.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_batch_rejected() {
        let net = zoo::bundled("resnet18").unwrap();
        assert_eq!(extract_features::<f64>(&net, 0, FeatureSchema::TRAINING), Err(FeatureError::BatchSize));
    }

    #[test]
    fn inference_subset_matches_training_columns() {
        let net = zoo::bundled("mnasnet").unwrap();
        let train = extract_features::<Exact>(&net, 4, FeatureSchema::TRAINING).unwrap();
        let infer = extract_features::<Exact>(&net, 4, FeatureSchema::INFERENCE).unwrap();
        for (name, v) in infer.iter() {
            assert_eq!(train.get(&name), Some(v), "{name}");
        }
    }

    #[test]
    fn csv_export_shape() {
        let net = zoo::bundled("resnet18").unwrap();
        let fv = extract_features::<f64>(&net, 128, FeatureSchema::TRAINING).unwrap();
        let key = FeatureRowKey { network: "resnet18".into(), pruning_level: 0, strategy: "random".into(), seed: 0 };
        let mut buf = Vec::new();
        write_feature_csv(&mut buf, FeatureSchema::TRAINING, &[(key, fv)]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0].split(',').count(), 47);
        assert!(lines[0].starts_with("mem_w,mem_w_grad,"));
        assert!(lines[1].ends_with(",resnet18,0,random,0,128"));
    }
}
