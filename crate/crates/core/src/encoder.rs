//! Image backbone and the BEV encoder blocks.

use crate::attention::{DeformConfig, FeaturePyramid, SpatialCrossAttention, TemporalSelfAttention};
use crate::bev::{align_previous, BevGrid, EgoMotion, Pose, ReferencePointTable};
use crate::diff::{Graph, Init, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv, LayerNorm, Linear};
use crate::pnm::RgbImage;
use crate::scalar::Scalar;

pub const LEVEL_STRIDES: [f64; 3] = [4.0, 8.0, 16.0];

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub grid: BevGrid,
    pub n_blocks: usize,
    pub ffn_hidden: usize,
    pub n_heads: usize,
    pub n_points: usize,
    /// Trunk widths at strides 2, 4 and 8/16.
    pub backbone: [usize; 3],
}

impl EncoderConfig {
    pub fn new(grid: BevGrid) -> Self {
        let d = grid.d;
        Self {
            grid,
            n_blocks: 3,
            ffn_hidden: 2 * d,
            n_heads: 4,
            n_points: 4,
            backbone: [16, 32, 32],
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.n_blocks == 0 || self.ffn_hidden == 0 || self.backbone.contains(&0) {
            return Err(Error::InvalidArgument("encoder needs at least one block and non-zero widths".into()));
        }
        DeformConfig::new(self.grid.d, self.n_heads, LEVEL_STRIDES.len(), self.n_points)?;
        Ok(())
    }
}

/// Six strided 3x3 conv layers with 1x1 laterals and top-down fusion,
/// producing `d`-channel levels at strides 4, 8 and 16.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub trunk: Vec<Conv>,
    pub lateral: Vec<Conv>,
}

impl Backbone {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, widths: [usize; 3], d: usize) -> Result<Self> {
        let [a, b, c] = widths;
        let plan = [(3, a, 2), (a, b, 2), (b, b, 1), (b, c, 2), (c, c, 2), (c, c, 1)];
        let trunk = plan
            .iter()
            .enumerate()
            .map(|(i, &(ci, co, s))| Conv::new(store, &format!("{name}.conv{i}"), ci, co, 3, s))
            .collect::<Result<Vec<_>>>()?;
        let lateral = [b, c, c]
            .iter()
            .enumerate()
            .map(|(i, &ci)| Conv::new(store, &format!("{name}.lateral{i}"), ci, d, 1, 1))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { trunk, lateral })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, image: Var) -> Result<FeaturePyramid> {
        let s = g.shape(image).to_vec();
        if s.len() != 3 || s[0] != 3 || s[1] % 16 != 0 || s[2] % 16 != 0 || s[1] == 0 || s[2] == 0 {
            return Err(Error::shape("extract_pyramid", "[3, H, W] with H, W multiples of 16", format!("{s:?}")));
        }
        let mut x = image;
        let mut taps = Vec::with_capacity(3);
        for (i, conv) in self.trunk.iter().enumerate() {
            let y = conv.forward(g, store, x)?;
            x = g.relu(y);
            if i == 2 || i == 3 || i == 5 {
                taps.push(x);
            }
        }
        let p2 = self.lateral[2].forward(g, store, taps[2])?;
        let l1 = self.lateral[1].forward(g, store, taps[1])?;
        let up2 = g.upsample2x(p2)?;
        let p1 = g.add(l1, up2)?;
        let l0 = self.lateral[0].forward(g, store, taps[0])?;
        let up1 = g.upsample2x(p1)?;
        let p0 = g.add(l0, up1)?;
        Ok(FeaturePyramid {
            levels: vec![p0, p1, p2],
            strides: LEVEL_STRIDES.to_vec(),
        })
    }
}

/// Image tensor `[3, H, W]` scaled to `[-0.5, 0.5]`.
pub fn image_tensor<T: Scalar>(img: &RgbImage) -> Tensor<T> {
    let (w, h) = (img.width, img.height);
    let mut data = vec![T::zero(); 3 * w * h];
    for y in 0..h {
        for x in 0..w {
            let px = img.get(x, y);
            for c in 0..3 {
                data[c * w * h + y * w + x] = T::of(px[c] as f64 / 255.0 - 0.5);
            }
        }
    }
    Tensor::new(&[3, h, w], data).expect("image buffer size")
}

#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub tsa: TemporalSelfAttention,
    pub norm1: LayerNorm,
    pub sca: SpatialCrossAttention,
    pub norm2: LayerNorm,
    pub ffn1: Linear,
    pub ffn2: Linear,
    pub norm3: LayerNorm,
}

/// BEV features of one frame, detached from any graph.
#[derive(Clone, Debug, PartialEq)]
pub struct BevState<T> {
    pub features: Tensor<T>,
    pub frame: usize,
    pub pose: Pose,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub backbone: Backbone,
    pub query: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<EncoderBlock>,
}

impl Encoder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.grid.d;
        let q = cfg.grid.cells();
        let backbone = Backbone::new(store, "backbone", cfg.backbone, d)?;
        let query = store.add("bev.query", &[q, d], Init::Normal { std: 0.02 })?;
        let pos = store.add("bev.pos", &[q, d], Init::Normal { std: 0.02 })?;
        let dcfg = DeformConfig::new(d, cfg.n_heads, LEVEL_STRIDES.len(), cfg.n_points)?;
        let blocks = (0..cfg.n_blocks)
            .map(|b| {
                let p = format!("encoder.{b}");
                Ok(EncoderBlock {
                    tsa: TemporalSelfAttention::new(store, &format!("{p}.tsa"), d, cfg.n_heads, cfg.n_points)?,
                    norm1: LayerNorm::new(store, &format!("{p}.norm1"), d)?,
                    sca: SpatialCrossAttention::new(store, &format!("{p}.sca"), dcfg)?,
                    norm2: LayerNorm::new(store, &format!("{p}.norm2"), d)?,
                    ffn1: Linear::new(store, &format!("{p}.ffn1"), d, cfg.ffn_hidden, true)?,
                    ffn2: Linear::new(store, &format!("{p}.ffn2"), cfg.ffn_hidden, d, true)?,
                    norm3: LayerNorm::new(store, &format!("{p}.norm3"), d)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { cfg, backbone, query, pos, blocks })
    }

    /// Initial BEV queries: embedding plus positional embedding.
    pub fn queries<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>) -> Result<Var> {
        let q = g.param(store, self.query);
        let p = g.param(store, self.pos);
        g.add(q, p)
    }

    /// Encodes one frame. `history` is the aligned previous BEV map and its
    /// validity raster, already detached.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        images: &[Var],
        history: Option<(&Tensor<T>, &[bool])>,
        table: &ReferencePointTable,
    ) -> Result<Var> {
        if images.len() != table.n_cameras {
            return Err(Error::shape("encode", format!("{} views", table.n_cameras), images.len()));
        }
        let grid = &self.cfg.grid;
        let pyramids = images
            .iter()
            .map(|&img| self.backbone.forward(g, store, img))
            .collect::<Result<Vec<_>>>()?;
        let hist = match history {
            Some((t, valid)) => {
                if t.shape() != [grid.cells(), grid.d] || valid.len() != grid.cells() {
                    return Err(Error::shape("encode history", format!("[{}, {}]", grid.cells(), grid.d), format!("{:?}", t.shape())));
                }
                Some((g.constant(t.clone()), valid))
            }
            None => None,
        };
        let mut x = self.queries(g, store)?;
        for b in &self.blocks {
            let t = b.tsa.forward(g, store, x, hist, grid.h, grid.w)?;
            let r = g.add(x, t)?;
            x = b.norm1.forward(g, store, r)?;
            let s = b.sca.forward(g, store, x, &pyramids, table)?;
            let r = g.add(x, s)?;
            x = b.norm2.forward(g, store, r)?;
            let f = b.ffn1.forward(g, store, x)?;
            let f = g.relu(f);
            let f = b.ffn2.forward(g, store, f)?;
            let r = g.add(x, f)?;
            x = b.norm3.forward(g, store, r)?;
        }
        Ok(x)
    }

    /// Aligns a previous state to the current frame.
    pub fn align<T: Scalar>(&self, prev: &BevState<T>, motion: &EgoMotion) -> Result<(Tensor<T>, Vec<bool>)> {
        align_previous(&prev.features, motion, &self.cfg.grid)
    }
}
