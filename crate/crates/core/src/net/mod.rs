//! Corrective-force prediction network.
//!
//! A sparse-voxel U-Net: an encoder block, a bottleneck of convolutions
//! that halve the voxel resolution, and a decoder whose blocks fuse the
//! running decoder feature with the matching skip feature through a
//! sigmoid gate (`alpha * dec + (1 - alpha) * skip`). The final voxel
//! features are copied back to the points and a shared MLP emits six
//! channels per point: an external and an internal force, whose sum is the
//! corrective resultant.
//!
//! Forward and backward passes are written out by hand in `f64`.

mod checkpoint;
pub(crate) mod sparse;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{voxelize, PointCloud, Vec3, VoxelGrid, DEFAULT_VOXEL_SIZE};
use sparse::{conv_backward, conv_forward, Hierarchy, KernelMap, KVOL};

pub use checkpoint::{Checkpoint, CheckpointParam, TrainingMeta, CHECKPOINT_VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Full,
    Pruned,
}

/// Per-voxel input features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputFeatures {
    /// A constant 1 per occupied voxel.
    Occupancy,
    /// The constant 1 followed by the mean coordinates of the voxel's points.
    Coordinates,
    /// The constant 1 followed by the offset of the voxel's mean point from
    /// the voxel center, in voxel units.
    #[default]
    Offsets,
}

impl InputFeatures {
    pub fn channels(self) -> usize {
        match self {
            Self::Occupancy => 1,
            Self::Coordinates | Self::Offsets => 4,
        }
    }

    fn build(self, grid: &VoxelGrid, cloud: &PointCloud) -> Vec<f64> {
        let c = self.channels();
        let mut x = vec![0.0; grid.num_voxels() * c];
        for ((row, pts), v) in x
            .chunks_exact_mut(c)
            .zip(&grid.voxel_to_points)
            .zip(&grid.coords)
        {
            row[0] = 1.0;
            if self == Self::Occupancy {
                continue;
            }
            let mut m = Vec3::zeros();
            for &i in pts {
                m += cloud.points()[i];
            }
            m /= pts.len() as f64;
            if self == Self::Offsets {
                let center = Vec3::new(v[0] as f64, v[1] as f64, v[2] as f64).add_scalar(0.5)
                    * grid.voxel_size;
                m = (m - center) / grid.voxel_size;
            }
            row[1..].copy_from_slice(m.as_slice());
        }
        x
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub variant: Variant,
    pub input_features: InputFeatures,
    /// Width of the encoder and bottleneck features.
    pub base_channels: usize,
    /// Widths of the four decoder blocks; the pruned variant uses the last two.
    pub decoder_channels: Vec<usize>,
    pub head_hidden: Vec<usize>,
    pub voxel_size: f64,
    pub kernel_size: usize,
    /// Halve the voxel resolution in every bottleneck convolution but the last.
    pub downsample: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Full,
            input_features: InputFeatures::default(),
            base_channels: 32,
            decoder_channels: vec![32, 32, 32, 16],
            head_hidden: vec![32, 16],
            voxel_size: DEFAULT_VOXEL_SIZE,
            kernel_size: 3,
            downsample: true,
        }
    }
}

impl NetworkConfig {
    pub fn pruned() -> Self {
        Self {
            variant: Variant::Pruned,
            ..Self::default()
        }
    }

    pub fn encoder_convs(&self) -> usize {
        match self.variant {
            Variant::Full => 2,
            Variant::Pruned => 1,
        }
    }

    pub fn bottleneck_convs(&self) -> usize {
        match self.variant {
            Variant::Full => 4,
            Variant::Pruned => 2,
        }
    }

    pub fn decoder_blocks(&self) -> usize {
        self.bottleneck_convs()
    }

    fn block_channels(&self) -> &[usize] {
        &self.decoder_channels[self.decoder_channels.len() - self.decoder_blocks()..]
    }

    /// Number of voxel resolutions the network touches.
    pub fn levels(&self) -> usize {
        if self.downsample {
            self.bottleneck_convs()
        } else {
            1
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            return Err(Error::config("base_channels", "must be >= 1"));
        }
        if self.decoder_channels.len() != 4 || self.decoder_channels.contains(&0) {
            return Err(Error::config(
                "decoder_channels",
                "needs exactly 4 positive widths",
            ));
        }
        if self.head_hidden.contains(&0) {
            return Err(Error::config("head_hidden", "widths must be positive"));
        }
        if !(self.voxel_size > 0.0 && self.voxel_size.is_finite()) {
            return Err(Error::config("voxel_size", "must be positive"));
        }
        if self.kernel_size != 3 {
            return Err(Error::config(
                "kernel_size",
                "only 3x3x3 kernels are supported",
            ));
        }
        Ok(())
    }
}

/// Per-point forces predicted by the network.
#[derive(Debug, Clone, PartialEq)]
pub struct ForcePrediction {
    pub external: Vec<Vec3>,
    pub internal: Vec<Vec3>,
    /// Row-wise `external + internal`.
    pub resultant: Vec<Vec3>,
}

impl ForcePrediction {
    pub fn new(external: Vec<Vec3>, internal: Vec<Vec3>) -> Result<Self> {
        if external.len() != internal.len() {
            return Err(Error::ShapeMismatch {
                context: "force heads",
                expected: external.len(),
                found: internal.len(),
            });
        }
        let resultant = external.iter().zip(&internal).map(|(e, i)| e + i).collect();
        Ok(Self {
            external,
            internal,
            resultant,
        })
    }

    pub fn zeros(n: usize) -> Self {
        let z = vec![Vec3::zeros(); n];
        Self {
            external: z.clone(),
            internal: z.clone(),
            resultant: z,
        }
    }

    pub fn len(&self) -> usize {
        self.resultant.len()
    }

    pub fn is_empty(&self) -> bool {
        self.resultant.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Resample {
    Same,
    Down,
    Up,
}

/// One sparse convolution; `level` is the resolution of its input.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Conv {
    cin: usize,
    cout: usize,
    level: usize,
    resample: Resample,
    w: usize,
    b: usize,
}

impl Conv {
    fn map<'a>(&self, h: &'a Hierarchy) -> &'a KernelMap {
        match self.resample {
            Resample::Same => &h.same[self.level],
            Resample::Down => &h.down[self.level],
            Resample::Up => &h.up[self.level - 1],
        }
    }

    fn out_level(&self) -> usize {
        match self.resample {
            Resample::Same => self.level,
            Resample::Down => self.level + 1,
            Resample::Up => self.level - 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Dense {
    cin: usize,
    cout: usize,
    w: usize,
    b: usize,
}

/// Gated skip fusion followed by one convolution.
#[derive(Debug, Clone, Copy, PartialEq)]
struct McSkip {
    proj_decoder: Conv,
    proj_skip: Conv,
    gate: Conv,
    post: Conv,
}

/// Name, shape and offset of one parameter tensor in the flat vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    config: NetworkConfig,
    params: Vec<f64>,
    specs: Vec<ParamSpec>,
    layout: Layout,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    encoder: Vec<Conv>,
    bottleneck: Vec<Conv>,
    decoder: Vec<McSkip>,
    head: Vec<Dense>,
}

struct Builder {
    specs: Vec<ParamSpec>,
    size: usize,
}

impl Builder {
    fn tensor(&mut self, name: String, shape: Vec<usize>) -> usize {
        let offset = self.size;
        self.size += shape.iter().product::<usize>();
        self.specs.push(ParamSpec {
            name,
            shape,
            offset,
        });
        offset
    }

    fn conv(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        level: usize,
        resample: Resample,
    ) -> Conv {
        let w = self.tensor(format!("{name}.weight"), vec![KVOL, cin, cout]);
        let b = self.tensor(format!("{name}.bias"), vec![cout]);
        Conv {
            cin,
            cout,
            level,
            resample,
            w,
            b,
        }
    }

    fn dense(&mut self, name: &str, cin: usize, cout: usize) -> Dense {
        let w = self.tensor(format!("{name}.weight"), vec![cin, cout]);
        let b = self.tensor(format!("{name}.bias"), vec![cout]);
        Dense { cin, cout, w, b }
    }
}

fn layout_for(config: &NetworkConfig) -> (Layout, Vec<ParamSpec>, usize) {
    let mut b = Builder {
        specs: Vec::new(),
        size: 0,
    };
    let c1 = config.base_channels;
    let mut encoder = Vec::new();
    let mut cin = config.input_features.channels();
    for i in 0..config.encoder_convs() {
        encoder.push(b.conv(&format!("encoder.{i}"), cin, c1, 0, Resample::Same));
        cin = c1;
    }

    // Level of F_1 .. F_{B+1}.
    let nb = config.bottleneck_convs();
    let mut levels = vec![0usize];
    let mut bottleneck = Vec::new();
    for i in 0..nb {
        let level = levels[i];
        let resample = if config.downsample && i + 1 < nb {
            Resample::Down
        } else {
            Resample::Same
        };
        let conv = b.conv(&format!("bottleneck.{i}"), c1, c1, level, resample);
        levels.push(conv.out_level());
        bottleneck.push(conv);
    }

    let mut decoder = Vec::new();
    let mut dec_ch = c1;
    for (j, &width) in config.block_channels().iter().enumerate() {
        // Block j fuses with skip F_{B-j} (0-based feature index nb - 1 - j).
        let skip = nb - 1 - j;
        let level = levels[skip];
        let proj_decoder = b.conv(
            &format!("decoder.{j}.proj_decoder"),
            dec_ch,
            width,
            level,
            Resample::Same,
        );
        let proj_skip = b.conv(
            &format!("decoder.{j}.proj_skip"),
            c1,
            width,
            level,
            Resample::Same,
        );
        let gate = b.conv(
            &format!("decoder.{j}.gate"),
            width,
            1,
            level,
            Resample::Same,
        );
        let resample = if skip > 0 && levels[skip - 1] < level {
            Resample::Up
        } else {
            Resample::Same
        };
        let post = b.conv(&format!("decoder.{j}.post"), width, width, level, resample);
        decoder.push(McSkip {
            proj_decoder,
            proj_skip,
            gate,
            post,
        });
        dec_ch = width;
    }

    let mut head = Vec::new();
    let mut hin = dec_ch;
    for (i, &h) in config.head_hidden.iter().enumerate() {
        head.push(b.dense(&format!("head.{i}"), hin, h));
        hin = h;
    }
    head.push(b.dense(&format!("head.{}", config.head_hidden.len()), hin, 6));

    (
        Layout {
            encoder,
            bottleneck,
            decoder,
            head,
        },
        b.specs,
        b.size,
    )
}

/// Number of trainable scalars a config produces, without allocating weights.
pub fn parameter_count_for(config: &NetworkConfig) -> usize {
    layout_for(config).2
}

/// Values recorded by a forward pass and consumed by [`Network::backward`].
#[derive(Debug, Clone)]
pub struct Trace {
    grid: VoxelGrid,
    hierarchy: Hierarchy,
    input: Vec<f64>,
    encoder_out: Vec<Vec<f64>>,
    features: Vec<Vec<f64>>,
    blocks: Vec<BlockTrace>,
    point_features: Vec<f64>,
    head_out: Vec<Vec<f64>>,
    prediction: ForcePrediction,
}

#[derive(Debug, Clone)]
struct BlockTrace {
    input: Vec<f64>,
    dec: Vec<f64>,
    skip: Vec<f64>,
    alpha: Vec<f64>,
    fused: Vec<f64>,
    out: Vec<f64>,
}

impl Trace {
    pub fn prediction(&self) -> &ForcePrediction {
        &self.prediction
    }

    pub fn into_prediction(self) -> ForcePrediction {
        self.prediction
    }

    /// Gate values of every decoder block, one per voxel of that block's level.
    pub fn gates(&self) -> Vec<&[f64]> {
        self.blocks.iter().map(|b| b.alpha.as_slice()).collect()
    }

    /// Number of occupied voxels at each resolution level.
    pub fn level_sizes(&self) -> Vec<usize> {
        self.hierarchy.coords.iter().map(Vec::len).collect()
    }

    pub fn grid(&self) -> &VoxelGrid {
        &self.grid
    }
}

/// Knobs for diagnostic forward passes.
#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions {
    /// Replace every gate output with this constant (skips the sigmoid).
    pub gate_override: Option<f64>,
}

/// Slope of the activation below zero.
pub const LEAK: f64 = 0.01;

fn leaky_relu(x: &mut [f64]) {
    for v in x {
        if *v < 0.0 {
            *v *= LEAK;
        }
    }
}

fn leaky_relu_grad(grad: &mut [f64], out: &[f64]) {
    for (g, &o) in grad.iter_mut().zip(out) {
        if o < 0.0 {
            *g *= LEAK;
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl Network {
    /// Builds a network with deterministic uniform fan-in initialization.
    pub fn build(config: &NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layout, specs, size) = layout_for(config);
        let mut params = vec![0.0; size];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for spec in &specs {
            if !spec.name.ends_with(".weight") {
                continue;
            }
            let fan_in: usize = spec.shape[..spec.shape.len() - 1].iter().product();
            let bound = (6.0 / fan_in as f64).sqrt();
            for p in &mut params[spec.offset..spec.offset + spec.len()] {
                *p = rng.random_range(-bound..bound);
            }
        }
        Ok(Self {
            config: config.clone(),
            params,
            specs,
            layout,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn parameter_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    fn slice(&self, off: usize, len: usize) -> &[f64] {
        &self.params[off..off + len]
    }

    fn run_conv(&self, h: &Hierarchy, c: &Conv, x: &[f64], relu: bool) -> Vec<f64> {
        let mut y = conv_forward(
            c.map(h),
            x,
            c.cin,
            self.slice(c.w, KVOL * c.cin * c.cout),
            self.slice(c.b, c.cout),
            c.cout,
        );
        if relu {
            leaky_relu(&mut y);
        }
        y
    }

    pub fn forward(&self, cloud: &PointCloud) -> Result<ForcePrediction> {
        Ok(self
            .forward_traced(cloud, ForwardOptions::default())?
            .into_prediction())
    }

    pub fn forward_traced(&self, cloud: &PointCloud, opts: ForwardOptions) -> Result<Trace> {
        if cloud.is_empty() {
            return Err(Error::invalid("cannot run the network on an empty cloud"));
        }
        let grid = voxelize(cloud, self.config.voxel_size)?;
        let h = Hierarchy::build(&grid.coords, self.config.levels());
        let input = self.config.input_features.build(&grid, cloud);

        let mut x = input.clone();
        let mut encoder_out = Vec::new();
        for conv in &self.layout.encoder {
            let y = self.run_conv(&h, conv, &x, true);
            encoder_out.push(y.clone());
            x = y;
        }
        let mut features = vec![x];
        for conv in &self.layout.bottleneck {
            let y = self.run_conv(&h, conv, features.last().unwrap(), true);
            features.push(y);
        }

        let nb = self.layout.bottleneck.len();
        let mut blocks = Vec::with_capacity(self.layout.decoder.len());
        let mut cur = features[nb].clone();
        for (j, block) in self.layout.decoder.iter().enumerate() {
            let McSkip {
                proj_decoder: pd,
                proj_skip: ps,
                gate,
                post,
            } = *block;
            let skip_in = &features[nb - 1 - j];
            let dec = self.run_conv(&h, &pd, &cur, true);
            let skip = self.run_conv(&h, &ps, skip_in, true);
            let alpha: Vec<f64> = match opts.gate_override {
                Some(a) => vec![a; skip.len() / ps.cout],
                None => self
                    .run_conv(&h, &gate, &skip, false)
                    .into_iter()
                    .map(sigmoid)
                    .collect(),
            };
            let w = pd.cout;
            let mut fused = vec![0.0; dec.len()];
            for (v, &a) in alpha.iter().enumerate() {
                for c in v * w..(v + 1) * w {
                    fused[c] = a * dec[c] + (1.0 - a) * skip[c];
                }
            }
            let out = self.run_conv(&h, &post, &fused, true);
            blocks.push(BlockTrace {
                input: std::mem::take(&mut cur),
                dec,
                skip,
                alpha,
                fused,
                out: out.clone(),
            });
            cur = out;
        }

        let last = self.layout.decoder.last().unwrap().post;
        let point_features = crate::geometry::devoxelize(&grid, &cur, last.cout)?;

        let n = cloud.len();
        let mut head_out = Vec::with_capacity(self.layout.head.len());
        let mut hx = point_features.clone();
        let nl = self.layout.head.len();
        for (li, d) in self.layout.head.iter().enumerate() {
            let w = self.slice(d.w, d.cin * d.cout);
            let b = self.slice(d.b, d.cout);
            let mut y = vec![0.0; n * d.cout];
            for (xrow, yrow) in hx.chunks_exact(d.cin).zip(y.chunks_exact_mut(d.cout)) {
                yrow.copy_from_slice(b);
                for (c, &xv) in xrow.iter().enumerate() {
                    if xv == 0.0 {
                        continue;
                    }
                    for (yv, &wv) in yrow.iter_mut().zip(&w[c * d.cout..(c + 1) * d.cout]) {
                        *yv += xv * wv;
                    }
                }
            }
            if li + 1 < nl {
                leaky_relu(&mut y);
            }
            head_out.push(y.clone());
            hx = y;
        }

        let external = hx
            .chunks_exact(6)
            .map(|r| Vec3::new(r[0], r[1], r[2]))
            .collect();
        let internal = hx
            .chunks_exact(6)
            .map(|r| Vec3::new(r[3], r[4], r[5]))
            .collect();
        let prediction = ForcePrediction::new(external, internal)?;
        if prediction
            .resultant
            .iter()
            .any(|v| !v.iter().all(|c| c.is_finite()))
        {
            return Err(Error::Numerical(
                "network produced a non-finite force".into(),
            ));
        }
        Ok(Trace {
            grid,
            hierarchy: h,
            input,
            encoder_out,
            features,
            blocks,
            point_features,
            head_out,
            prediction,
        })
    }

    /// Gradient of a scalar objective with respect to every parameter, given
    /// the objective's gradient with respect to the two force heads.
    pub fn backward(
        &self,
        trace: &Trace,
        grad_external: &[Vec3],
        grad_internal: &[Vec3],
    ) -> Result<Vec<f64>> {
        let n = trace.prediction.len();
        for g in [grad_external, grad_internal] {
            if g.len() != n {
                return Err(Error::ShapeMismatch {
                    context: "force gradient",
                    expected: n,
                    found: g.len(),
                });
            }
        }
        let mut grads = vec![0.0; self.params.len()];
        let h = &trace.hierarchy;

        // Head.
        let mut gy: Vec<f64> = grad_external
            .iter()
            .zip(grad_internal)
            .flat_map(|(e, i)| [e.x, e.y, e.z, i.x, i.y, i.z])
            .collect();
        for li in (0..self.layout.head.len()).rev() {
            let d = self.layout.head[li];
            let x = if li == 0 {
                &trace.point_features
            } else {
                &trace.head_out[li - 1]
            };
            let w = self.slice(d.w, d.cin * d.cout);
            let mut gx = vec![0.0; n * d.cin];
            {
                let (gw_all, gb_all) = grads.split_at_mut(d.b);
                let gw = &mut gw_all[d.w..d.w + d.cin * d.cout];
                let gb = &mut gb_all[..d.cout];
                for ((xrow, gyrow), gxrow) in x
                    .chunks_exact(d.cin)
                    .zip(gy.chunks_exact(d.cout))
                    .zip(gx.chunks_exact_mut(d.cin))
                {
                    for (acc, &g) in gb.iter_mut().zip(gyrow) {
                        *acc += g;
                    }
                    for c in 0..d.cin {
                        let wrow = &w[c * d.cout..(c + 1) * d.cout];
                        gxrow[c] = wrow.iter().zip(gyrow).map(|(a, b)| a * b).sum();
                        let xv = xrow[c];
                        if xv != 0.0 {
                            for (acc, &g) in gw[c * d.cout..(c + 1) * d.cout].iter_mut().zip(gyrow)
                            {
                                *acc += xv * g;
                            }
                        }
                    }
                }
            }
            if li > 0 {
                leaky_relu_grad(&mut gx, x);
            }
            gy = gx;
        }

        // Devoxelize: voxel gradient is the sum over its points.
        let last = self.layout.decoder.last().unwrap().post;
        let width = last.cout;
        let mut gcur = vec![0.0; trace.grid.num_voxels() * width];
        for (i, &v) in trace.grid.point_to_voxel.iter().enumerate() {
            for c in 0..width {
                gcur[v * width + c] += gy[i * width + c];
            }
        }

        let nb = self.layout.bottleneck.len();
        let mut gfeat: Vec<Vec<f64>> = trace.features.iter().map(|f| vec![0.0; f.len()]).collect();

        for (j, block) in self.layout.decoder.iter().enumerate().rev() {
            let McSkip {
                proj_decoder: pd,
                proj_skip: ps,
                gate,
                post,
            } = *block;
            let bt = &trace.blocks[j];
            let skip_idx = nb - 1 - j;

            leaky_relu_grad(&mut gcur, &bt.out);
            let mut gfused = vec![0.0; bt.fused.len()];
            self.conv_grad(h, &post, &bt.fused, &gcur, &mut grads, Some(&mut gfused));

            let w = pd.cout;
            let mut gdec = vec![0.0; bt.dec.len()];
            let mut gskip = vec![0.0; bt.skip.len()];
            let mut gz = vec![0.0; bt.alpha.len()];
            for (v, &a) in bt.alpha.iter().enumerate() {
                let mut galpha = 0.0;
                for c in v * w..(v + 1) * w {
                    gdec[c] = a * gfused[c];
                    gskip[c] = (1.0 - a) * gfused[c];
                    galpha += gfused[c] * (bt.dec[c] - bt.skip[c]);
                }
                gz[v] = galpha * a * (1.0 - a);
            }
            // Gate: alpha = sigmoid(gate(skip)). Under an override the
            // gate is detached; its gradient is then not meaningful anyway.
            self.conv_grad(h, &gate, &bt.skip, &gz, &mut grads, Some(&mut gskip));

            leaky_relu_grad(&mut gskip, &bt.skip);
            self.conv_grad(
                h,
                &ps,
                &trace.features[skip_idx],
                &gskip,
                &mut grads,
                Some(&mut gfeat[skip_idx]),
            );

            leaky_relu_grad(&mut gdec, &bt.dec);
            let mut ginput = vec![0.0; bt.input.len()];
            self.conv_grad(h, &pd, &bt.input, &gdec, &mut grads, Some(&mut ginput));
            gcur = ginput;
        }

        // gcur now holds the gradient of the bottleneck output F_{B+1}.
        for (a, b) in gfeat[nb].iter_mut().zip(&gcur) {
            *a += b;
        }
        for i in (0..nb).rev() {
            let c = self.layout.bottleneck[i];
            let mut gy = std::mem::take(&mut gfeat[i + 1]);
            leaky_relu_grad(&mut gy, &trace.features[i + 1]);
            let mut gx = std::mem::take(&mut gfeat[i]);
            self.conv_grad(h, &c, &trace.features[i], &gy, &mut grads, Some(&mut gx));
            gfeat[i] = gx;
        }

        let mut gy = std::mem::take(&mut gfeat[0]);
        for li in (0..self.layout.encoder.len()).rev() {
            let c = self.layout.encoder[li];
            leaky_relu_grad(&mut gy, &trace.encoder_out[li]);
            let x = if li == 0 {
                &trace.input
            } else {
                &trace.encoder_out[li - 1]
            };
            if li == 0 {
                self.conv_grad(h, &c, x, &gy, &mut grads, None);
            } else {
                let mut gx = vec![0.0; x.len()];
                self.conv_grad(h, &c, x, &gy, &mut grads, Some(&mut gx));
                gy = gx;
            }
        }
        Ok(grads)
    }

    fn conv_grad(
        &self,
        h: &Hierarchy,
        c: &Conv,
        x: &[f64],
        gy: &[f64],
        grads: &mut [f64],
        gx: Option<&mut [f64]>,
    ) {
        let wlen = KVOL * c.cin * c.cout;
        // Weights precede their bias in the flat layout.
        let (left, right) = grads.split_at_mut(c.b);
        conv_backward(
            c.map(h),
            x,
            c.cin,
            self.slice(c.w, wlen),
            c.cout,
            gy,
            &mut left[c.w..c.w + wlen],
            &mut right[..c.cout],
            gx,
        );
    }

    /// Snapshot of the parameters in the checkpoint container.
    pub fn to_checkpoint(&self, seed: u64, step: u64, meta: TrainingMeta) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            meta,
            seed,
            step,
            params: self
                .specs
                .iter()
                .map(|s| CheckpointParam {
                    name: s.name.clone(),
                    shape: s.shape.clone(),
                    data: self.params[s.offset..s.offset + s.len()]
                        .iter()
                        .map(|&v| v as f32)
                        .collect(),
                })
                .collect(),
        }
    }

    /// Restores a network; names and shapes must match the config's layout.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.config.validate()?;
        let (layout, specs, size) = layout_for(&ckpt.config);
        if specs.len() != ckpt.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                specs.len(),
                ckpt.params.len()
            )));
        }
        let mut params = vec![0.0; size];
        for (spec, p) in specs.iter().zip(&ckpt.params) {
            if spec.name != p.name || spec.shape != p.shape || p.data.len() != spec.len() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` {:?} does not match config layout `{}` {:?}",
                    p.name, p.shape, spec.name, spec.shape
                )));
            }
            for (dst, &src) in params[spec.offset..].iter_mut().zip(&p.data) {
                *dst = f64::from(src);
            }
        }
        Ok(Self {
            config: ckpt.config.clone(),
            params,
            specs,
            layout,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::normalize_cloud;

    fn blob(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = (0..n)
            .map(|_| {
                let v = Vec3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                );
                v.normalize() * rng.random_range(0.9..1.0)
            })
            .collect();
        normalize_cloud(&PointCloud::new(pts).unwrap())
    }

    fn tiny() -> NetworkConfig {
        NetworkConfig {
            base_channels: 8,
            decoder_channels: vec![8, 8, 8, 4],
            head_hidden: vec![8],
            voxel_size: 0.15,
            ..Default::default()
        }
    }

    #[test]
    fn block_counts_per_variant() {
        let full = Network::build(&NetworkConfig::default(), 0).unwrap();
        let pruned = Network::build(&NetworkConfig::pruned(), 0).unwrap();
        assert_eq!(full.layout.decoder.len(), 4);
        assert_eq!(pruned.layout.decoder.len(), 2);
        assert_eq!(full.layout.encoder.len(), 2);
        assert_eq!(pruned.layout.encoder.len(), 1);
        assert_eq!(pruned.layout.bottleneck.len(), 2);
        let ratio = pruned.parameter_count() as f64 / full.parameter_count() as f64;
        assert!((0.25..=0.45).contains(&ratio), "{ratio}");
        assert_eq!(
            parameter_count_for(&NetworkConfig::default()),
            full.parameter_count()
        );
    }

    #[test]
    fn same_seed_same_weights() {
        let a = Network::build(&tiny(), 5).unwrap();
        assert_eq!(a, Network::build(&tiny(), 5).unwrap());
        assert_ne!(a.params(), Network::build(&tiny(), 6).unwrap().params());
    }

    #[test]
    fn shapes_and_resultant_identity() {
        let net = Network::build(&tiny(), 1).unwrap();
        let cloud = blob(10, 2);
        let p = net.forward(&cloud).unwrap();
        assert_eq!(p.external.len(), 10);
        assert_eq!(p.internal.len(), 10);
        for i in 0..10 {
            assert_eq!(p.resultant[i], p.external[i] + p.internal[i]);
        }
    }

    #[test]
    fn shared_voxel_shares_output() {
        let net = Network::build(&NetworkConfig::default(), 3).unwrap();
        let cloud =
            PointCloud::from_xyz(&[[0.001, 0.001, 0.001], [0.02, 0.02, 0.02], [0.5, 0.0, 0.0]])
                .unwrap();
        let p = net.forward(&cloud).unwrap();
        assert_eq!(p.external[0], p.external[1]);
        assert_eq!(p.internal[0], p.internal[1]);
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = NetworkConfig::default();
        c.kernel_size = 5;
        assert!(Network::build(&c, 0).is_err());
        let c = NetworkConfig {
            decoder_channels: vec![8, 8],
            ..Default::default()
        };
        assert!(Network::build(&c, 0).is_err());
    }

    #[test]
    fn gates_strictly_inside_unit_interval() {
        let net = Network::build(&tiny(), 11).unwrap();
        let t = net
            .forward_traced(&blob(200, 4), ForwardOptions::default())
            .unwrap();
        for g in t.gates() {
            assert!(g.iter().all(|&a| a > 0.0 && a < 1.0));
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let net = Network::build(&tiny(), 21).unwrap();
        let cloud = blob(64, 8);
        let t = net
            .forward_traced(&cloud, ForwardOptions::default())
            .unwrap();
        let ones = vec![Vec3::new(1.0, 1.0, 1.0); cloud.len()];
        let g = net.backward(&t, &ones, &ones).unwrap();
        let objective = |net: &Network| -> f64 {
            net.forward(&cloud)
                .unwrap()
                .resultant
                .iter()
                .map(|v| v.x + v.y + v.z)
                .sum()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..30 {
            let i = rng.random_range(0..net.parameter_count());
            let h = 1e-4;
            let mut plus = net.clone();
            plus.params_mut()[i] += h;
            let mut minus = net.clone();
            minus.params_mut()[i] -= h;
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
            let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-6);
            assert!(rel < 1e-4, "param {i}: fd {fd} analytic {}", g[i]);
        }
    }
}
