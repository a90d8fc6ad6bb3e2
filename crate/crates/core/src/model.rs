//! The stage-one reconstructor: posed images → tri-plane radiance field.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::camera::CameraPose;
use crate::diffusion::stack_images;
use crate::error::{Error, Result};
use crate::io::Config;
use crate::lifting::{lift_view, Aggregator, Encoder, FeatureVolume, VolumeDims};
use crate::nn::{Bound, Init, ParamStore};
use crate::renderer::{render, Decoder, RenderConfig, RenderOutput, TriPlaneField, BLACK, WHITE};
use crate::tensor::{read_checkpoint, write_checkpoint, Tape, Tensor, Var};
use crate::triplane::{AttentionPlacement, TriPlane, TriPlaneBuilder, TriPlaneConfig, UpsampleMode};

/// A posed image `[3, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub image: Tensor,
    pub pose: CameraPose,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReconConfig {
    pub encoder_hidden: usize,
    /// Channels of image features, the voxel grid and the tri-plane.
    pub channels: usize,
    pub volume_res: usize,
    pub volume_embedding: bool,
    pub triplane: TriPlaneConfig,
    pub mlp_width: usize,
    pub feature_channels: usize,
    pub density_gain: f64,
    pub render: RenderConfig,
}

impl Default for ReconConfig {
    fn default() -> Self {
        ReconConfig {
            encoder_hidden: 16,
            channels: 16,
            volume_res: 16,
            volume_embedding: true,
            triplane: TriPlaneConfig::default(),
            mlp_width: 64,
            feature_channels: 16,
            density_gain: 10.0,
            render: RenderConfig::default(),
        }
    }
}

impl ReconConfig {
    /// Reads (and records) every reconstructor key of `cfg`.
    pub fn from_config(cfg: &mut Config) -> Result<Self> {
        let d = ReconConfig::default();
        let mode = match cfg.resolve("upsample_mode", "learned".to_string())?.as_str() {
            "learned" => UpsampleMode::Learned,
            "bicubic" => UpsampleMode::Bicubic,
            other => return Err(Error::invalid("config", format!("unknown upsample_mode `{other}`"))),
        };
        let attention = match cfg.resolve("attention", "final".to_string())?.as_str() {
            "off" => AttentionPlacement::Off,
            "final" => AttentionPlacement::FinalBlock,
            "every" => AttentionPlacement::EveryBlock,
            other => return Err(Error::invalid("config", format!("unknown attention `{other}`"))),
        };
        let background = match cfg.resolve("background", "white".to_string())?.as_str() {
            "white" => WHITE,
            "black" => BLACK,
            other => return Err(Error::invalid("config", format!("unknown background `{other}`"))),
        };
        let channels = cfg.resolve("channels", d.channels)?;
        let volume_res = cfg.resolve("volume_res", d.volume_res)?;
        let triplane_res = cfg.resolve("triplane_res", volume_res << d.triplane.upsample_log2)?;
        if triplane_res % volume_res != 0 {
            return Err(Error::invalid("config", "triplane_res must be a multiple of volume_res"));
        }
        let upsample_log2 = crate::triplane::upsample_log2(triplane_res / volume_res)?;
        Ok(ReconConfig {
            encoder_hidden: cfg.resolve("encoder_hidden", d.encoder_hidden)?,
            channels,
            volume_res,
            volume_embedding: cfg.resolve("volume_embedding", d.volume_embedding)?,
            triplane: TriPlaneConfig {
                channels,
                upsample_log2,
                mode,
                attention,
                attention_kv_pool: cfg.resolve("attention_kv_pool", d.triplane.attention_kv_pool)?,
            },
            mlp_width: cfg.resolve("mlp_width", d.mlp_width)?,
            feature_channels: cfg.resolve("feature_channels", d.feature_channels)?,
            density_gain: cfg.resolve("density_gain", d.density_gain)?,
            render: RenderConfig {
                n_samples: cfg.resolve("n_samples", d.render.n_samples)?,
                background,
                jitter: false,
                seed: 0,
            },
        })
    }

    pub fn dims(&self) -> VolumeDims {
        VolumeDims::cube(self.channels, self.volume_res)
    }
}

fn stack_views<'t>(tape: &'t Tape, views: &[View]) -> Result<Var<'t>> {
    if views.is_empty() {
        return Err(Error::invalid("reconstruct", "need at least one input view"));
    }
    stack_images(tape, views.iter().map(|v| &v.image))
}

#[derive(Clone, Debug)]
pub struct Reconstructor {
    pub cfg: ReconConfig,
    pub store: ParamStore,
    encoder: Encoder,
    aggregator: Aggregator,
    planes: TriPlaneBuilder,
    decoder: Decoder,
}

impl Reconstructor {
    pub fn new(cfg: ReconConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = cfg.channels;
        let encoder = Encoder::new(&mut store, "encoder", cfg.encoder_hidden, c, Init::Scaled(1.0), &mut rng);
        let aggregator = Aggregator::new(&mut store, "aggregate", cfg.dims(), cfg.volume_embedding, &mut rng);
        let planes = TriPlaneBuilder::new(&mut store, "triplane", &cfg.triplane, &mut rng);
        let decoder = Decoder::new(
            &mut store,
            "decoder",
            c,
            cfg.mlp_width,
            cfg.feature_channels,
            cfg.density_gain,
            &mut rng,
        );
        Reconstructor {
            cfg,
            store,
            encoder,
            aggregator,
            planes,
            decoder,
        }
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    pub fn aggregator(&self) -> &Aggregator {
        &self.aggregator
    }

    /// Per-view feature maps `[C, H/2, W/2]`.
    pub fn extract_features<'t>(&self, tape: &'t Tape, p: &Bound<'t>, views: &[View]) -> Result<Vec<Var<'t>>> {
        self.encode(p, stack_views(tape, views)?)
    }

    /// Feature maps of a stacked image batch `[n, 3, H, W]`.
    pub fn encode<'t>(&self, p: &Bound<'t>, images: Var<'t>) -> Result<Vec<Var<'t>>> {
        let feats = self.encoder.forward(p, images)?;
        let fs = feats.shape();
        (0..fs[0])
            .map(|i| feats.narrow(0, i, 1)?.reshape([fs[1], fs[2], fs[3]]))
            .collect()
    }

    pub fn lift<'t>(&self, tape: &'t Tape, p: &Bound<'t>, views: &[View]) -> Result<Vec<FeatureVolume<'t>>> {
        let poses: Vec<CameraPose> = views.iter().map(|v| v.pose.clone()).collect();
        self.lift_images(p, stack_views(tape, views)?, &poses)
    }

    /// Lifts a stacked image batch taken from `poses`.
    pub fn lift_images<'t>(&self, p: &Bound<'t>, images: Var<'t>, poses: &[CameraPose]) -> Result<Vec<FeatureVolume<'t>>> {
        if images.shape().first() != Some(&poses.len()) {
            return Err(Error::invalid("reconstruct", "need one pose per input image"));
        }
        self.encode(p, images)?
            .into_iter()
            .zip(poses)
            .map(|(f, pose)| lift_view(f, pose, self.cfg.dims()))
            .collect()
    }

    pub fn reconstruct<'t>(&self, tape: &'t Tape, p: &Bound<'t>, views: &[View]) -> Result<TriPlane<'t>> {
        let poses: Vec<CameraPose> = views.iter().map(|v| v.pose.clone()).collect();
        self.reconstruct_images(p, stack_views(tape, views)?, &poses)
    }

    /// Tri-plane from images `[n, 3, H, W]` that may carry gradients.
    pub fn reconstruct_images<'t>(&self, p: &Bound<'t>, images: Var<'t>, poses: &[CameraPose]) -> Result<TriPlane<'t>> {
        let volumes = self.lift_images(p, images, poses)?;
        let fused = self.aggregator.forward(p, &volumes)?;
        self.planes.forward(p, fused.grid()?)
    }

    pub fn field<'a, 't>(&'a self, p: &'a Bound<'t>, triplane: TriPlane<'t>) -> TriPlaneField<'a, 't> {
        TriPlaneField {
            triplane,
            decoder: &self.decoder,
            params: p,
        }
    }

    /// Reconstruct from `views` and render the full image at `pose`.
    pub fn render_view<'t>(
        &self,
        tape: &'t Tape,
        p: &Bound<'t>,
        views: &[View],
        pose: &CameraPose,
        with_feature: bool,
    ) -> Result<RenderOutput<'t>> {
        let tri = self.reconstruct(tape, p, views)?;
        render(tape, &self.field(p, tri), pose, &self.cfg.render, with_feature)
    }

    /// Inference helper: image and feature map as plain tensors.
    pub fn predict(&self, views: &[View], pose: &CameraPose) -> Result<(Tensor, Tensor)> {
        let tape = Tape::no_grad();
        let p = self.store.bind(&tape);
        let out = self.render_view(&tape, &p, views, pose, true)?;
        let feature = out.feature_map.expect("feature head requested");
        Ok(((*out.image.value()).clone(), (*feature.value()).clone()))
    }

    /// Like [`Reconstructor::predict`] without the feature head.
    pub fn predict_image(&self, views: &[View], pose: &CameraPose) -> Result<Tensor> {
        let tape = Tape::no_grad();
        let p = self.store.bind(&tape);
        let out = self.render_view(&tape, &p, views, pose, false)?;
        Ok((*out.image.value()).clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        write_checkpoint(std::io::BufWriter::new(file), &self.store.named_tensors())
    }

    pub fn load(cfg: ReconConfig, path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let tensors = read_checkpoint(std::io::BufReader::new(file))?;
        let mut model = Reconstructor::new(cfg, 0);
        model.store.load_named(&tensors)?;
        Ok(model)
    }
}
