//! Learned parameters and their binary file format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "GBWB"            4 bytes magic
//! version           u32
//! layer count       u32
//! per layer:
//!   kind tag        u8
//!   dim count       u32   (0 for layers without parameters)
//!   dims            u32 × dim count   (the weight tensor shape)
//!   data            f32 × (weights, then one bias per output unit)
//! ```
//!
//! The architecture lives in a text sidecar next to the checkpoint
//! (`<path>.arch`).

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::network::spec::NetworkSpec;
use crate::tensor::{Element, Tensor};

pub const MAGIC: &[u8; 4] = b"GBWB";
pub const FORMAT_VERSION: u32 = 1;

/// Weights and bias of one parametric layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<E = f32> {
    pub weights: Tensor<E>,
    pub bias: Tensor<E>,
}

impl<E: Element> LayerParams<E> {
    pub fn cast<F: Element>(&self) -> LayerParams<F> {
        LayerParams {
            weights: self.weights.cast(),
            bias: self.bias.cast(),
        }
    }

    pub fn sum_squares_f64(&self) -> f64 {
        self.weights.sum_squares_f64() + self.bias.sum_squares_f64()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<E = f32> {
    spec: NetworkSpec,
    params: Vec<Option<LayerParams<E>>>,
}

impl<E: Element> Checkpoint<E> {
    /// Assembles a checkpoint, checking parameter shapes against the spec.
    pub fn new(spec: NetworkSpec, params: Vec<Option<LayerParams<E>>>) -> Result<Self> {
        if params.len() != spec.layers().len() {
            return Err(Error::dim(format!(
                "{} parameter entries for {} layers",
                params.len(),
                spec.layers().len()
            )));
        }
        for (i, (layer, p)) in spec.layers().iter().zip(&params).enumerate() {
            match (layer.kind.param_shapes(), p) {
                (None, None) => {}
                (Some((ws, bs)), Some(p)) => {
                    if p.weights.shape() != ws.as_slice() || p.bias.shape() != bs.as_slice() {
                        return Err(Error::dim(format!(
                            "layer {i}: expected weights {ws:?} / bias {bs:?}, got {:?} / {:?}",
                            p.weights.shape(),
                            p.bias.shape()
                        )));
                    }
                }
                (Some(_), None) => {
                    return Err(Error::dim(format!("layer {i} ({}) is missing parameters", layer.kind.name())))
                }
                (None, Some(_)) => {
                    return Err(Error::dim(format!("layer {i} ({}) takes no parameters", layer.kind.name())))
                }
            }
        }
        Ok(Self { spec, params })
    }

    /// Uniform Glorot initialisation with zero biases.
    pub fn init(spec: NetworkSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = spec
            .layers()
            .iter()
            .map(|layer| {
                let (ws, bs) = layer.kind.param_shapes()?;
                let (fan_in, fan_out) = layer.kind.fans()?;
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let weights = Tensor::from_fn(ws, |_| E::from_f64(rng.gen_range(-limit..=limit))).ok()?;
                Some(LayerParams {
                    weights,
                    bias: Tensor::zeros(bs).ok()?,
                })
            })
            .collect();
        Self { spec, params }
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Option<LayerParams<E>>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Option<LayerParams<E>>] {
        &mut self.params
    }

    pub fn layer_params(&self, i: usize) -> Option<&LayerParams<E>> {
        self.params.get(i).and_then(Option::as_ref)
    }

    pub fn cast<F: Element>(&self) -> Checkpoint<F> {
        Checkpoint {
            spec: self.spec.clone(),
            params: self
                .params
                .iter()
                .map(|p| p.as_ref().map(LayerParams::cast))
                .collect(),
        }
    }

    /// Σθ² over the parameters of layers selected by `mask`.
    pub fn sum_squares_f64(&self, mask: &[bool]) -> f64 {
        self.params
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .filter_map(|(p, _)| p.as_ref())
            .map(LayerParams::sum_squares_f64)
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params
            .iter()
            .flatten()
            .all(|p| p.weights.all_finite() && p.bias.all_finite())
    }
}

impl Checkpoint<f32> {
    pub fn write_to(&self, mut out: impl Write) -> std::io::Result<()> {
        out.write_all(MAGIC)?;
        out.write_all(&FORMAT_VERSION.to_le_bytes())?;
        out.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for (layer, p) in self.spec.layers().iter().zip(&self.params) {
            out.write_all(&[layer.kind.tag()])?;
            match p {
                None => out.write_all(&0u32.to_le_bytes())?,
                Some(p) => {
                    let dims = p.weights.shape();
                    out.write_all(&(dims.len() as u32).to_le_bytes())?;
                    for &d in dims {
                        out.write_all(&(d as u32).to_le_bytes())?;
                    }
                    for v in p.weights.data().iter().chain(p.bias.data()) {
                        out.write_all(&v.to_le_bytes())?;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    /// Reads parameters for `spec` from the binary format.
    pub fn read_from(mut input: impl Read, spec: NetworkSpec) -> Result<Self> {
        let bad = |m: String| Error::format("checkpoint", m);
        let mut magic = [0u8; 4];
        read_exact(&mut input, &mut magic)?;
        if &magic != MAGIC {
            return Err(bad(format!("bad magic {magic:?}")));
        }
        let version = read_u32(&mut input)?;
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let count = read_u32(&mut input)? as usize;
        if count != spec.layers().len() {
            return Err(bad(format!(
                "file has {count} layers, architecture has {}",
                spec.layers().len()
            )));
        }
        let mut params = Vec::with_capacity(count);
        for (i, layer) in spec.layers().iter().enumerate() {
            let mut tag = [0u8];
            read_exact(&mut input, &mut tag)?;
            if tag[0] != layer.kind.tag() {
                return Err(bad(format!(
                    "layer {i}: tag {} does not match architecture kind {}",
                    tag[0],
                    layer.kind.name()
                )));
            }
            let ndims = read_u32(&mut input)? as usize;
            if ndims > 8 {
                return Err(bad(format!("layer {i}: implausible dim count {ndims}")));
            }
            let dims = (0..ndims)
                .map(|_| read_u32(&mut input).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            match layer.kind.param_shapes() {
                None if dims.is_empty() => params.push(None),
                Some((ws, bs)) if dims == ws => {
                    let weights = read_f32s(&mut input, ws.iter().product())?;
                    let bias = read_f32s(&mut input, bs[0])?;
                    params.push(Some(LayerParams {
                        weights: Tensor::new(ws, weights)?,
                        bias: Tensor::new(bs, bias)?,
                    }));
                }
                expected => {
                    return Err(bad(format!(
                        "layer {i}: dims {dims:?} do not match architecture {:?}",
                        expected.map(|(w, _)| w)
                    )))
                }
            }
        }
        let mut rest = Vec::new();
        input
            .read_to_end(&mut rest)
            .map_err(|e| bad(e.to_string()))?;
        if !rest.is_empty() {
            return Err(bad(format!("{} trailing bytes", rest.len())));
        }
        Checkpoint::new(spec, params)
    }

    /// Writes the binary checkpoint and its architecture sidecar.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))?;
        let arch = arch_sidecar(path);
        fs::write(&arch, self.spec.to_string()).map_err(|e| Error::io(arch, e))
    }

    /// Loads a checkpoint and its `<path>.arch` sidecar.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let arch = arch_sidecar(path);
        let text = fs::read_to_string(&arch).map_err(|e| Error::io(&arch, e))?;
        let spec: NetworkSpec = text.parse()?;
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(bytes.as_slice(), spec)
    }
}

/// `<path>.arch`
pub fn arch_sidecar(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".arch");
    PathBuf::from(os)
}

fn read_exact(input: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    input
        .read_exact(buf)
        .map_err(|e| Error::format("checkpoint", format!("truncated: {e}")))
}

fn read_u32(input: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(input, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f32s(input: &mut impl Read, n: usize) -> Result<Vec<f32>> {
    let mut bytes = vec![0u8; n * 4];
    read_exact(input, &mut bytes)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}
