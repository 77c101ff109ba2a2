//! Integer invertible watermark network.
//!
//! `L` coupling layers act on a pair (image branch `[C,H,W]`, map branch
//! `[1,L,L]`). Per layer:
//!
//! ```text
//! s1 = r1 + round(U(r2))
//! f  = round(exp(sigmoid(S(s1))))        f in {1, 2, 3}
//! s2 = r2 * f + round(Q(s1))
//! ```
//!
//! and the inverse recomputes `f` and `Q(s1)` from `s1` alone. Over integers
//! the inverse is exact; on noised input the same algebra runs in `f64`.

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};
use crate::numerics::{ops, Eval, Graph, IntTensor, RealTensor, Var};
use crate::subnets::{block_count, subnet_forward, SubnetConfig, SubnetParams};

/// Largest magnitude any integer intermediate may reach; `f64` represents
/// every integer up to 2^53 exactly, and the margin keeps sums exact too.
pub const INT_ENVELOPE: i64 = 1 << 50;

/// Shape of the whole network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Side of the square watermark map; carries `map_side^2` bits.
    pub map_side: usize,
    pub layers: usize,
    pub n_feat: usize,
}

impl Geometry {
    pub fn new(side: usize, channels: usize, map_side: usize, layers: usize, n_feat: usize) -> Result<Self> {
        let g = Geometry {
            height: side,
            width: side,
            channels,
            map_side,
            layers,
            n_feat,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.height != self.width {
            return Err(Error::BadParams(format!(
                "images must be square, got {}x{}",
                self.height, self.width
            )));
        }
        if self.layers == 0 || self.channels == 0 || self.channels > 4 || self.n_feat == 0 {
            return Err(Error::BadParams(format!("invalid geometry {self:?}")));
        }
        block_count(self.height, self.map_side)?;
        Ok(())
    }

    pub fn bits(&self) -> usize {
        self.map_side * self.map_side
    }

    pub fn n_blocks(&self) -> usize {
        block_count(self.height, self.map_side).expect("validated geometry")
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn map_shape(&self) -> [usize; 3] {
        [1, self.map_side, self.map_side]
    }

    pub fn up_config(&self) -> SubnetConfig {
        SubnetConfig::up(self.height, self.map_side, self.channels, self.n_feat).expect("validated geometry")
    }

    pub fn down_config(&self) -> SubnetConfig {
        SubnetConfig::down(self.height, self.map_side, self.channels, self.n_feat).expect("validated geometry")
    }
}

/// The three sub-networks of one coupling layer.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingParams<T> {
    /// Map branch to image branch (up-sampling).
    pub u: SubnetParams<T>,
    /// Image branch to log-scale logits (down-sampling).
    pub s: SubnetParams<T>,
    /// Image branch to map-branch shift (down-sampling).
    pub q: SubnetParams<T>,
}

impl<T> CouplingParams<T> {
    pub fn tensors(&self) -> Vec<&T> {
        let mut out = self.u.tensors();
        out.extend(self.s.tensors());
        out.extend(self.q.tensors());
        out
    }

    pub fn try_map<U>(&self, mut f: impl FnMut(&T) -> Result<U>) -> Result<CouplingParams<U>> {
        Ok(CouplingParams {
            u: self.u.try_map(&mut f)?,
            s: self.s.try_map(&mut f)?,
            q: self.q.try_map(&mut f)?,
        })
    }
}

/// All learnable parameters plus the geometry they were built for.
#[derive(Debug, Clone, PartialEq)]
pub struct IIWNParams {
    pub geometry: Geometry,
    pub layers: Vec<CouplingParams<RealTensor>>,
}

impl IIWNParams {
    /// Seeded initialization; see [`SubnetParams::init`].
    pub fn init(geometry: Geometry, seed: u64) -> Result<Self> {
        geometry.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (up, down) = (geometry.up_config(), geometry.down_config());
        let layers = (0..geometry.layers)
            .map(|_| CouplingParams {
                u: SubnetParams::init(&up, &mut rng),
                s: SubnetParams::init(&down, &mut rng),
                q: SubnetParams::init(&down, &mut rng),
            })
            .collect();
        Ok(IIWNParams { geometry, layers })
    }

    pub fn tensors(&self) -> Vec<&RealTensor> {
        self.layers.iter().flat_map(|l| l.tensors()).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut RealTensor> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            for sub in [&mut l.u, &mut l.s, &mut l.q] {
                out.push(&mut sub.initial.weight);
                out.push(&mut sub.initial.bias);
                for b in &mut sub.blocks {
                    for c in [&mut b.conv, &mut b.attention, &mut b.resample] {
                        out.push(&mut c.weight);
                        out.push(&mut c.bias);
                    }
                }
                out.push(&mut sub.last.weight);
                out.push(&mut sub.last.bias);
            }
        }
        out
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Rebuilds the layer structure around `vars`, given in [`Self::tensors`] order.
    pub fn bind(&self, vars: &[Var]) -> Result<Vec<CouplingParams<Var>>> {
        let expected = self.tensors().len();
        if vars.len() != expected {
            return Err(Error::LengthMismatch {
                expected,
                actual: vars.len(),
            });
        }
        let mut it = vars.iter().copied();
        self.layers
            .iter()
            .map(|l| {
                l.try_map(|_| {
                    it.next().ok_or(Error::LengthMismatch {
                        expected,
                        actual: vars.len(),
                    })
                })
            })
            .collect()
    }

    /// Registers every tensor as a trainable leaf on `g`.
    pub fn to_graph(&self, g: &mut Graph) -> Vec<CouplingParams<Var>> {
        self.layers
            .iter()
            .map(|l| l.try_map(|t| Ok(g.param(t.clone()))).expect("infallible"))
            .collect()
    }
}

/// `{0,1}` bits to a `[1,L,L]` map of `-1/+1`, row-major.
pub fn bits_to_map(bits: &[bool], map_side: usize) -> Result<IntTensor> {
    if bits.len() != map_side * map_side {
        return Err(Error::LengthMismatch {
            expected: map_side * map_side,
            actual: bits.len(),
        });
    }
    IntTensor::new(
        vec![1, map_side, map_side],
        bits.iter().map(|&b| if b { 1 } else { -1 }).collect(),
    )
}

/// Thresholds a real-valued map at 0; ties go to 1.
pub fn map_to_bits(map: &RealTensor) -> Vec<bool> {
    map.data().iter().map(|&v| v >= 0.0).collect()
}

fn check_envelope(v: i64, site: &'static str) -> Result<i64> {
    if v.abs() > INT_ENVELOPE {
        return Err(Error::NumericOverflow(site));
    }
    Ok(v)
}

/// Rounds a subnet output to integers, rejecting values outside the envelope.
fn round_to_int(t: &RealTensor, site: &'static str) -> Result<IntTensor> {
    let mut out = Vec::with_capacity(t.len());
    for &v in t.data() {
        if !v.is_finite() || v.abs() > INT_ENVELOPE as f64 {
            return Err(Error::NumericOverflow(site));
        }
        out.push(ops::round_half_away(v) as i64);
    }
    IntTensor::new(t.shape().to_vec(), out)
}

/// `round(exp(sigmoid(v)))`, always 1, 2 or 3.
pub fn scale_factor(v: f64) -> i64 {
    ops::round_half_away(ops::sigmoid(v).exp()) as i64
}

fn factors(s_out: &RealTensor) -> Result<IntTensor> {
    if !s_out.all_finite() {
        return Err(Error::NonFiniteInput("scale subnet"));
    }
    Ok(s_out.map(scale_factor))
}

fn with_batch<T: crate::numerics::Element>(t: &crate::numerics::Tensor<T>) -> Result<crate::numerics::Tensor<T>> {
    let mut shape = vec![1];
    shape.extend_from_slice(t.shape());
    t.clone().reshape(&shape)
}

fn without_batch<T: crate::numerics::Element>(t: crate::numerics::Tensor<T>) -> Result<crate::numerics::Tensor<T>> {
    let shape = t.shape()[1..].to_vec();
    t.reshape(&shape)
}

fn run(x: &RealTensor, p: &SubnetParams<RealTensor>, cfg: &SubnetConfig) -> Result<RealTensor> {
    subnet_forward(&mut Eval, x, p, cfg)
}

/// One integer coupling layer on batched `[1,C,H,W]` / `[1,1,L,L]` tensors.
pub fn coupling_forward(
    r1: &IntTensor,
    r2: &IntTensor,
    p: &CouplingParams<RealTensor>,
    geometry: &Geometry,
) -> Result<(IntTensor, IntTensor)> {
    let (up, down) = (geometry.up_config(), geometry.down_config());
    let u = round_to_int(&run(&r2.to_real(), &p.u, &up)?, "U output")?;
    let s1 = add_checked(r1, &u, "s1")?;
    let s1r = s1.to_real();
    let f = factors(&run(&s1r, &p.s, &down)?)?;
    let q = round_to_int(&run(&s1r, &p.q, &down)?, "Q output")?;
    let mut s2 = Vec::with_capacity(r2.len());
    for ((&r, &fv), &qv) in r2.data().iter().zip(f.data()).zip(q.data()) {
        let v = r
            .checked_mul(fv)
            .and_then(|x| x.checked_add(qv))
            .ok_or(Error::NumericOverflow("s2"))?;
        s2.push(check_envelope(v, "s2")?);
    }
    Ok((s1, IntTensor::new(r2.shape().to_vec(), s2)?))
}

fn add_checked(a: &IntTensor, b: &IntTensor, site: &'static str) -> Result<IntTensor> {
    if a.shape() != b.shape() {
        return Err(shape_err(format!("{site}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    let mut out = Vec::with_capacity(a.len());
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let v = x.checked_add(y).ok_or(Error::NumericOverflow(site))?;
        out.push(check_envelope(v, site)?);
    }
    IntTensor::new(a.shape().to_vec(), out)
}

/// Exact inverse of [`coupling_forward`]. A nonzero remainder in the division
/// by the scale factor proves `(s1, s2)` did not come from the forward map.
pub fn coupling_inverse(
    s1: &IntTensor,
    s2: &IntTensor,
    p: &CouplingParams<RealTensor>,
    geometry: &Geometry,
) -> Result<(IntTensor, IntTensor)> {
    let (up, down) = (geometry.up_config(), geometry.down_config());
    let s1r = s1.to_real();
    let f = factors(&run(&s1r, &p.s, &down)?)?;
    let q = round_to_int(&run(&s1r, &p.q, &down)?, "Q output")?;
    if s2.shape() != q.shape() {
        return Err(shape_err(format!("latent {:?} vs map {:?}", s2.shape(), q.shape())));
    }
    let mut r2 = Vec::with_capacity(s2.len());
    for (index, ((&s, &fv), &qv)) in s2.data().iter().zip(f.data()).zip(q.data()).enumerate() {
        let num = s.checked_sub(qv).ok_or(Error::NumericOverflow("s2 - Q"))?;
        let remainder = num % fv;
        if remainder != 0 {
            return Err(Error::InexactDivision { index, remainder });
        }
        r2.push(num / fv);
    }
    let r2 = IntTensor::new(s2.shape().to_vec(), r2)?;
    let u = round_to_int(&run(&r2.to_real(), &p.u, &up)?, "U output")?;
    let neg_u = u.map(|v| -v);
    let r1 = add_checked(s1, &neg_u, "r1")?;
    Ok((r1, r2))
}

/// Real-valued inverse layer used on possibly distorted input.
fn coupling_inverse_real(
    s1: &RealTensor,
    s2: &RealTensor,
    p: &CouplingParams<RealTensor>,
    geometry: &Geometry,
) -> Result<(RealTensor, RealTensor)> {
    let (up, down) = (geometry.up_config(), geometry.down_config());
    let f = factors(&run(s1, &p.s, &down)?)?;
    let q = run(s1, &p.q, &down)?.map(ops::round_half_away);
    let r2 = s2.zip_map(&q, |s, qv| s - qv)?.zip_map(&f, |n, fv| n / fv as f64)?;
    let u = run(&r2, &p.u, &up)?.map(ops::round_half_away);
    let r1 = s1.zip_map(&u, |s, uv| s - uv)?;
    Ok((r1, r2))
}

fn check_input_shapes(geometry: &Geometry, image: &[usize], map: &[usize]) -> Result<()> {
    if image != geometry.image_shape() || map != geometry.map_shape() {
        return Err(shape_err(format!(
            "inputs {image:?}/{map:?} do not match geometry {:?}/{:?}",
            geometry.image_shape(),
            geometry.map_shape()
        )));
    }
    Ok(())
}

/// `(cover [C,H,W], map [1,L,L]) -> (overflowed stego [C,H,W], z [1,L,L])`.
pub fn iiwn_forward(cover: &IntTensor, wm: &IntTensor, theta: &IIWNParams) -> Result<(IntTensor, IntTensor)> {
    let geo = &theta.geometry;
    check_input_shapes(geo, cover.shape(), wm.shape())?;
    let mut a = with_batch(cover)?;
    let mut b = with_batch(wm)?;
    for layer in &theta.layers {
        (a, b) = coupling_forward(&a, &b, layer, geo)?;
    }
    Ok((without_batch(a)?, without_batch(b)?))
}

/// Exact inverse: recovers the cover and the `-1/+1` map from the overflowed
/// stego and the true latent.
pub fn iiwn_inverse_lossless(stego: &IntTensor, z: &IntTensor, theta: &IIWNParams) -> Result<(IntTensor, IntTensor)> {
    let geo = &theta.geometry;
    check_input_shapes(geo, stego.shape(), z.shape())?;
    let mut a = with_batch(stego)?;
    let mut b = with_batch(z)?;
    for layer in theta.layers.iter().rev() {
        (a, b) = coupling_inverse(&a, &b, layer, geo)?;
    }
    Ok((without_batch(a)?, without_batch(b)?))
}

/// The same inverse in `f64`, for distorted stegos and a guessed latent
/// (zeros at extraction). Returns the reconstructed image and map logits.
pub fn iiwn_inverse_lossy(
    stego: &RealTensor,
    z_hat: &RealTensor,
    theta: &IIWNParams,
) -> Result<(RealTensor, RealTensor)> {
    let geo = &theta.geometry;
    check_input_shapes(geo, stego.shape(), z_hat.shape())?;
    let mut a = with_batch(stego)?;
    let mut b = with_batch(z_hat)?;
    for layer in theta.layers.iter().rev() {
        (a, b) = coupling_inverse_real(&a, &b, layer, geo)?;
    }
    Ok((without_batch(a)?, without_batch(b)?))
}

/// Records the forward map on the tape for a batch `[N,C,H,W]` / `[N,1,L,L]`.
/// Rounding follows the graph's mode.
pub fn graph_forward(
    g: &mut Graph,
    cover: Var,
    map: Var,
    layers: &[CouplingParams<Var>],
    geometry: &Geometry,
) -> Result<(Var, Var)> {
    let (up, down) = (geometry.up_config(), geometry.down_config());
    let (mut r1, mut r2) = (cover, map);
    for p in layers {
        let u = subnet_forward(g, &r2, &p.u, &up)?;
        let u = g.round_ste(u)?;
        let s1 = g.add(r1, u)?;
        let f = graph_factor(g, s1, &p.s, &down)?;
        let q = subnet_forward(g, &s1, &p.q, &down)?;
        let q = g.round_ste(q)?;
        let scaled = g.mul(r2, f)?;
        let s2 = g.add(scaled, q)?;
        (r1, r2) = (s1, s2);
    }
    Ok((r1, r2))
}

fn graph_factor(g: &mut Graph, s1: Var, p: &SubnetParams<Var>, down: &SubnetConfig) -> Result<Var> {
    let s = subnet_forward(g, &s1, p, down)?;
    let s = g.sigmoid(s);
    let e = g.exp(s);
    g.round_ste(e)
}

/// Records the inverse map; returns `(reconstructed image, map logits)`.
pub fn graph_inverse(
    g: &mut Graph,
    stego: Var,
    z_hat: Var,
    layers: &[CouplingParams<Var>],
    geometry: &Geometry,
) -> Result<(Var, Var)> {
    let (up, down) = (geometry.up_config(), geometry.down_config());
    let (mut s1, mut s2) = (stego, z_hat);
    for p in layers.iter().rev() {
        let f = graph_factor(g, s1, &p.s, &down)?;
        let q = subnet_forward(g, &s1, &p.q, &down)?;
        let q = g.round_ste(q)?;
        let num = g.sub(s2, q)?;
        let r2 = g.div(num, f)?;
        let u = subnet_forward(g, &r2, &p.u, &up)?;
        let u = g.round_ste(u)?;
        let r1 = g.sub(s1, u)?;
        (s1, s2) = (r1, r2);
    }
    Ok((s1, s2))
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"IIWN";
const CHECKPOINT_VERSION: u32 = 1;

/// Writes the checkpoint container:
///
/// ```text
/// "IIWN" | version u32 | H W C L M layers N_f N_d (u32 each) | count u64
///        | count f64 parameters | CRC-32 of the parameter bytes (u32)
/// ```
///
/// All integers and floats little-endian.
pub fn save_checkpoint<W: Write>(theta: &IIWNParams, mut out: W) -> Result<()> {
    let g = &theta.geometry;
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    for v in [
        g.height,
        g.width,
        g.channels,
        g.map_side,
        g.bits(),
        g.layers,
        g.n_feat,
        g.n_blocks(),
    ] {
        out.write_all(&(v as u32).to_le_bytes())?;
    }
    let count = theta.scalar_count();
    out.write_all(&(count as u64).to_le_bytes())?;
    let mut payload = Vec::with_capacity(count * 8);
    for t in theta.tensors() {
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&payload)?;
    out.write_all(&crc32fast::hash(&payload).to_le_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn load_checkpoint<R: Read>(mut input: R) -> Result<IIWNParams> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = read_u32(&mut input)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut f = [0usize; 8];
    for v in &mut f {
        *v = read_u32(&mut input)? as usize;
    }
    let [height, width, channels, map_side, bits, layers, n_feat, n_blocks] = f;
    let geometry = Geometry {
        height,
        width,
        channels,
        map_side,
        layers,
        n_feat,
    };
    geometry
        .validate()
        .map_err(|e| Error::Checkpoint(format!("geometry: {e}")))?;
    if bits != geometry.bits() || n_blocks != geometry.n_blocks() {
        return Err(Error::Checkpoint("inconsistent geometry fields".into()));
    }
    let mut count = [0u8; 8];
    input.read_exact(&mut count)?;
    let count = u64::from_le_bytes(count) as usize;
    let mut theta = IIWNParams::init(geometry, 0)?;
    if count != theta.scalar_count() {
        return Err(Error::Checkpoint(format!(
            "{count} parameters stored, geometry needs {}",
            theta.scalar_count()
        )));
    }
    let mut payload = vec![0u8; count * 8];
    input.read_exact(&mut payload)?;
    let stored = read_u32(&mut input)?;
    let computed = crc32fast::hash(&payload);
    if stored != computed {
        return Err(Error::ChecksumMismatch { stored, computed });
    }
    let mut chunks = payload.chunks_exact(8);
    for t in theta.tensors_mut() {
        for v in t.data_mut() {
            *v = f64::from_le_bytes(chunks.next().expect("count checked").try_into().expect("8 bytes"));
        }
    }
    Ok(theta)
}
