//! Classifier saliency maps from guided backpropagation, and the quantities
//! derived from them: top-fraction masks, pairwise saliency differences,
//! per-class aggregate heatmaps and within-class consistency (R²).

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::network::Checkpoint;
use crate::tensor::{Element, Tensor};

/// Default fraction of pixels kept when masking a single saliency map.
pub const DEFAULT_MASK_FRACTION: f64 = 0.05;
/// Default fraction of pixels highlighted in an averaged class heatmap.
pub const DEFAULT_HIGHLIGHT_FRACTION: f64 = 0.05;

/// How the `[C,H,W]` guided gradient collapses to one value per pixel.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum ChannelReduction {
    #[default]
    Sum,
    Max,
}

impl FromStr for ChannelReduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Self::Sum),
            "max" => Ok(Self::Max),
            other => Err(Error::InvalidArgument(format!("unknown channel reduction {other:?}"))),
        }
    }
}

impl fmt::Display for ChannelReduction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Sum => "sum",
            Self::Max => "max",
        })
    }
}

/// Non-negative per-pixel importance for one image and one class.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub image_id: String,
    pub class_id: usize,
    values: Tensor,
}

impl SaliencyMap {
    pub fn new(image_id: impl Into<String>, class_id: usize, values: Tensor) -> Result<Self> {
        values.dims2()?;
        if let Some(bad) = values.data().iter().find(|v| !(**v >= 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "saliency values must be non-negative, found {bad}"
            )));
        }
        Ok(Self {
            image_id: image_id.into(),
            class_id,
            values,
        })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn top_percent(&self, p: f64) -> Result<BinaryMask> {
        top_percent_mask(&self.values, p)
    }
}

/// A `{0,1}` pixel mask.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    bits: Tensor,
    retained_fraction: f64,
}

impl BinaryMask {
    /// Wraps an `[H,W]` tensor whose entries are all 0 or 1.
    pub fn from_bits(bits: Tensor) -> Result<Self> {
        bits.dims2()?;
        if bits.data().iter().any(|&b| b != 0.0 && b != 1.0) {
            return Err(Error::InvalidArgument("mask entries must be 0 or 1".into()));
        }
        let ones = bits.data().iter().filter(|&&b| b == 1.0).count();
        let retained_fraction = ones as f64 / bits.len() as f64;
        Ok(Self {
            bits,
            retained_fraction,
        })
    }

    pub fn from_indices(height: usize, width: usize, indices: impl IntoIterator<Item = usize>) -> Result<Self> {
        let mut bits = Tensor::zeros([height, width])?;
        for i in indices {
            *bits
                .data_mut()
                .get_mut(i)
                .ok_or_else(|| Error::dim(format!("mask index {i} outside {height}x{width}")))? = 1.0;
        }
        Self::from_bits(bits)
    }

    pub fn bits(&self) -> &Tensor {
        &self.bits
    }

    /// Fraction of pixels set.
    pub fn retained_fraction(&self) -> f64 {
        self.retained_fraction
    }

    pub fn count(&self) -> usize {
        self.bits.data().iter().filter(|&&b| b == 1.0).count()
    }

    pub fn is_set(&self, index: usize) -> bool {
        self.bits.data()[index] == 1.0
    }

    /// Row-major indices of set pixels.
    pub fn indices(&self) -> Vec<usize> {
        self.bits
            .data()
            .iter()
            .enumerate()
            .filter(|(_, &b)| b == 1.0)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.bits.shape()[0], self.bits.shape()[1])
    }
}

/// `ceil(p·n)`, computed so that products landing on an integer up to
/// floating-point error (e.g. `0.07 × 100`) are not rounded up.
pub fn retained_count(p: f64, n: usize) -> Result<usize> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::InvalidArgument(format!("fraction must lie in (0, 1], got {p}")));
    }
    let exact = p * n as f64;
    let nearest = exact.round();
    let k = if (exact - nearest).abs() <= 1e-9 * exact.max(1.0) {
        nearest
    } else {
        exact.ceil()
    };
    Ok((k as usize).clamp(1, n))
}

/// Keeps the `ceil(p·H·W)` highest-valued pixels; ties go to the lower
/// row-major index.
pub fn top_percent_mask(values: &Tensor, p: f64) -> Result<BinaryMask> {
    let (h, w) = values.dims2()?;
    let k = retained_count(p, values.len())?;
    let v = values.data();
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
    let mut mask = BinaryMask::from_indices(h, w, order[..k].iter().copied())?;
    mask.retained_fraction = p;
    Ok(mask)
}

/// Collapses a `[C,H,W]` tensor to `[H,W]`.
pub fn reduce_channels<E: Element>(grad: &Tensor<E>, reduction: ChannelReduction) -> Result<Tensor<E>> {
    let (c, h, w) = grad.dims3()?;
    let plane = h * w;
    let d = grad.data();
    Tensor::from_fn([h, w], |i| {
        let channel = (0..c).map(|ch| d[ch * plane + i]);
        match reduction {
            ChannelReduction::Sum => channel.fold(E::zero(), |a, b| a + b),
            ChannelReduction::Max => channel.fold(E::neg_infinity(), E::max),
        }
    })
}

/// Guided-backpropagation saliency of class `y` on `image`.
pub fn gb_map(
    checkpoint: &Checkpoint,
    image: &Tensor,
    y: usize,
    image_id: &str,
    reduction: ChannelReduction,
) -> Result<SaliencyMap> {
    let (_, trace) = checkpoint.forward(image)?;
    let grad = checkpoint.guided_backward(&trace, y)?;
    SaliencyMap::new(image_id, y, reduce_channels(&grad, reduction)?)
}

/// `relu(a − b)` elementwise.
pub fn saliency_difference_of(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_map(b, |x, y| (x - y).max(0.0))
}

/// Regions that favour class `y` over class `z` on the same image:
/// `relu(GB(y, X) − GB(z, X))`.
pub fn saliency_difference(
    checkpoint: &Checkpoint,
    image: &Tensor,
    y: usize,
    z: usize,
    reduction: ChannelReduction,
) -> Result<Tensor> {
    if y == z {
        return Err(Error::InvalidArgument(format!(
            "saliency difference needs two distinct classes, got {y} twice"
        )));
    }
    let (_, trace) = checkpoint.forward(image)?;
    let gy = reduce_channels(&checkpoint.guided_backward(&trace, y)?, reduction)?;
    let gz = reduce_channels(&checkpoint.guided_backward(&trace, z)?, reduction)?;
    saliency_difference_of(&gy, &gz)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassHeatmap {
    /// Mean of the per-image top-fraction indicators; values in `[0,1]`.
    pub heatmap: Tensor,
    pub highlight: BinaryMask,
}

/// Averages the top-`p_filter` indicator of each map, then highlights the
/// top `p_highlight` of the average.
pub fn class_saliency_heatmap(maps: &[SaliencyMap], p_filter: f64, p_highlight: f64) -> Result<ClassHeatmap> {
    let first = maps
        .first()
        .ok_or_else(|| Error::EmptyInput("no saliency maps to aggregate".into()))?;
    let shape = first.values().shape().to_vec();
    let mut sum = vec![0u32; first.values().len()];
    for map in maps {
        map.values().expect_shape(&shape)?;
        for i in map.top_percent(p_filter)?.indices() {
            sum[i] += 1;
        }
    }
    let n = maps.len() as f64;
    let heatmap = Tensor::from_fn(shape, |i| (sum[i] as f64 / n) as f32)?;
    let highlight = top_percent_mask(&heatmap, p_highlight)?;
    Ok(ClassHeatmap { heatmap, highlight })
}

/// Between-class and within-class sums of squares of a one-way ANOVA with
/// pixels pooled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anova {
    pub ss_between: f64,
    pub ss_within: f64,
}

impl Anova {
    pub fn ss_total(&self) -> f64 {
        self.ss_between + self.ss_within
    }

    pub fn r_squared(&self) -> Result<f64> {
        let total = self.ss_total();
        if total == 0.0 {
            return Err(Error::Degenerate(
                "all maps are identical; total variation is zero".into(),
            ));
        }
        Ok((self.ss_between / total).clamp(0.0, 1.0))
    }
}

pub fn anova(maps: &[SaliencyMap]) -> Result<Anova> {
    let mut groups: BTreeMap<usize, Vec<&SaliencyMap>> = BTreeMap::new();
    for m in maps {
        groups.entry(m.class_id).or_default().push(m);
    }
    if groups.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "consistency needs at least 2 classes, got {}",
            groups.len()
        )));
    }
    if let Some((class, g)) = groups.iter().find(|(_, g)| g.len() < 2) {
        return Err(Error::InvalidArgument(format!(
            "class {class} has {} map(s); at least 2 per class are needed",
            g.len()
        )));
    }
    let shape = maps[0].values().shape();
    for m in maps {
        m.values().expect_shape(shape)?;
    }
    let pixels = maps[0].values().len();
    let n_total = maps.len() as f64;

    let class_means: Vec<(f64, Vec<f64>)> = groups
        .values()
        .map(|g| {
            let mut mean = vec![0.0f64; pixels];
            for m in g {
                for (acc, &v) in mean.iter_mut().zip(m.values().data()) {
                    *acc += v as f64;
                }
            }
            let n = g.len() as f64;
            mean.iter_mut().for_each(|v| *v /= n);
            (n, mean)
        })
        .collect();
    let mut grand = vec![0.0f64; pixels];
    for (n, mean) in &class_means {
        for (acc, &m) in grand.iter_mut().zip(mean) {
            *acc += n * m;
        }
    }
    grand.iter_mut().for_each(|v| *v /= n_total);

    let mut ss_between = 0.0;
    for (n, mean) in &class_means {
        ss_between += n * mean.iter().zip(&grand).map(|(m, g)| (m - g).powi(2)).sum::<f64>();
    }
    let mut ss_within = 0.0;
    for (g, (_, mean)) in groups.values().zip(&class_means) {
        for m in g {
            ss_within += m
                .values()
                .data()
                .iter()
                .zip(mean)
                .map(|(&v, mu)| (v as f64 - mu).powi(2))
                .sum::<f64>();
        }
    }
    Ok(Anova {
        ss_between,
        ss_within,
    })
}

/// Fraction of the variation across maps explained by their class labels.
pub fn consistency_r2(maps: &[SaliencyMap]) -> Result<f64> {
    anova(maps)?.r_squared()
}

/// [`consistency_r2`] over the top-`p` indicators of the maps.
pub fn masked_consistency_r2(maps: &[SaliencyMap], p: f64) -> Result<f64> {
    let masked = maps
        .iter()
        .map(|m| SaliencyMap::new(m.image_id.clone(), m.class_id, m.top_percent(p)?.bits().clone()))
        .collect::<Result<Vec<_>>>()?;
    consistency_r2(&masked)
}
