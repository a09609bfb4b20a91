use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::mock::*;
use super::*;
use crate::error::AppealError;

pub type EncoderFactory = Arc<dyn Fn() -> Box<dyn ImageEncoder> + Send + Sync>;

/// Reference models each role is meant to be served by in a full-scale run.
/// These ids are accepted in config so a run file can name them, but no
/// adapter for them is compiled into this crate.
pub const REFERENCE_MODELS: [(Role, &str); 8] = [
    (Role::Captioner, "blip"),
    (Role::Segmenter, "clipseg"),
    (Role::Inpainter, "sd-2.1-inpainting-controlnet-depth"),
    (Role::InversionTrainer, "textual-inversion-sd"),
    (Role::Upscaler, "esrgan"),
    (Role::Depth, "midas"),
    (Role::Encoder, "clip-vit"),
    (Role::ImageSource, "stock-sites"),
];

/// `[backends]` block of the run config.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendsConfig {
    pub captioner: Option<String>,
    pub segmenter: Option<String>,
    pub inpainter: Option<String>,
    pub inversion_trainer: Option<String>,
    pub upscaler: Option<String>,
    pub depth: Option<String>,
    pub encoder: Option<String>,
    pub image_source: Option<String>,

    /// Root of the mock image-source corpus.
    pub corpus: Option<PathBuf>,
    #[serde(default)]
    pub fetch_delay_ms: u64,
    /// Caption used by the mock captioner when no sidecar exists.
    pub default_caption: Option<String>,
    pub segmenter_key_color: Option<[u8; 3]>,
    #[serde(default)]
    pub toy_inpainter: bool,
    pub upscale_factor: Option<u32>,
    pub embedding_dim: Option<usize>,
    pub encoder_grid: Option<usize>,
    pub encoder_dim: Option<usize>,
    pub encoder_seed: Option<u64>,
    /// Model paths or URLs for real adapters, keyed by role.
    #[serde(default)]
    pub models: BTreeMap<String, String>,
}

impl BackendsConfig {
    /// Every role bound to its mock.
    pub fn all_mock() -> Self {
        let mock = || Some(MOCK_ID.to_owned());
        Self {
            captioner: mock(),
            segmenter: mock(),
            inpainter: mock(),
            inversion_trainer: mock(),
            upscaler: mock(),
            depth: mock(),
            encoder: mock(),
            image_source: mock(),
            ..Self::default()
        }
    }

    pub fn binding(&self, role: Role) -> Option<&str> {
        match role {
            Role::Captioner => self.captioner.as_deref(),
            Role::Segmenter => self.segmenter.as_deref(),
            Role::Inpainter => self.inpainter.as_deref(),
            Role::InversionTrainer => self.inversion_trainer.as_deref(),
            Role::Upscaler => self.upscaler.as_deref(),
            Role::Depth => self.depth.as_deref(),
            Role::Encoder => self.encoder.as_deref(),
            Role::ImageSource => self.image_source.as_deref(),
        }
    }

    pub fn projection_config(&self) -> ProjectionConfig {
        let d = ProjectionConfig::default();
        ProjectionConfig {
            grid: self.encoder_grid.unwrap_or(d.grid),
            dim: self.encoder_dim.unwrap_or(d.dim),
            seed: self.encoder_seed.unwrap_or(d.seed),
        }
    }
}

#[derive(Clone)]
pub enum BackendHandle {
    Captioner(Arc<dyn Captioner>),
    Segmenter(Arc<dyn Segmenter>),
    Inpainter(Arc<dyn Inpainter>),
    InversionTrainer(Arc<dyn InversionTrainer>),
    Upscaler(Arc<dyn Upscaler>),
    Depth(Arc<dyn DepthEstimator>),
    Encoder(EncoderFactory),
    ImageSource(Arc<dyn ImageSource>),
}

impl BackendHandle {
    pub fn role(&self) -> Role {
        match self {
            BackendHandle::Captioner(_) => Role::Captioner,
            BackendHandle::Segmenter(_) => Role::Segmenter,
            BackendHandle::Inpainter(_) => Role::Inpainter,
            BackendHandle::InversionTrainer(_) => Role::InversionTrainer,
            BackendHandle::Upscaler(_) => Role::Upscaler,
            BackendHandle::Depth(_) => Role::Depth,
            BackendHandle::Encoder(_) => Role::Encoder,
            BackendHandle::ImageSource(_) => Role::ImageSource,
        }
    }
}

#[derive(Clone)]
enum Binding {
    Ready { implementation: String, handle: BackendHandle },
    /// Named in config but not compiled in.
    Unavailable { implementation: String },
}

/// Role -> implementation bindings for one pipeline run. Immutable once
/// built; handles are shared read-only.
#[derive(Clone, Default)]
pub struct BackendRegistry {
    bindings: BTreeMap<Role, Binding>,
}

impl std::fmt::Debug for BackendRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_map().entries(self.bindings()).finish()
    }
}

/// Implementation ids this build can construct, per role.
pub fn available_implementations(role: Role) -> Vec<String> {
    let reference = REFERENCE_MODELS
        .iter()
        .find(|(r, _)| *r == role)
        .map(|(_, id)| format!("{id} (reference, adapter not built)"));
    std::iter::once(MOCK_ID.to_owned()).chain(reference).collect()
}

impl BackendRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Binds a role to a handle, replacing any previous binding.
    pub fn bind(&mut self, implementation: impl Into<String>, handle: BackendHandle) -> &mut Self {
        self.bindings.insert(
            handle.role(),
            Binding::Ready {
                implementation: implementation.into(),
                handle,
            },
        );
        self
    }

    /// Registry with every role except the image source served by its mock,
    /// using default settings.
    pub fn mock(toy: bool) -> Self {
        let cfg = BackendsConfig {
            toy_inpainter: toy,
            image_source: None,
            ..BackendsConfig::all_mock()
        };
        Self::from_config(&cfg, None).expect("mock bindings are always constructible")
    }

    /// Builds the registry from config. `sidecar_dir` is where the mock
    /// captioner and segmenter look for per-image sidecars.
    pub fn from_config(cfg: &BackendsConfig, sidecar_dir: Option<&Path>) -> Result<Self> {
        let mut registry = Self::new();
        for role in Role::ALL {
            let Some(id) = cfg.binding(role) else { continue };
            if id == MOCK_ID {
                registry.bind(MOCK_ID, mock_handle(role, cfg, sidecar_dir)?);
            } else if REFERENCE_MODELS.iter().any(|(r, name)| *r == role && *name == id) {
                registry.bindings.insert(
                    role,
                    Binding::Unavailable {
                        implementation: id.to_owned(),
                    },
                );
            } else {
                return Err(AppealError::validation(
                    format!("backends.{role}"),
                    format!(
                        "unknown implementation `{id}`; available: {}",
                        available_implementations(role).join(", ")
                    ),
                ));
            }
        }
        Ok(registry)
    }

    /// Role -> implementation id.
    pub fn bindings(&self) -> BTreeMap<Role, String> {
        self.bindings
            .iter()
            .map(|(role, b)| {
                let id = match b {
                    Binding::Ready { implementation, .. } | Binding::Unavailable { implementation } => {
                        implementation.clone()
                    }
                };
                (*role, id)
            })
            .collect()
    }

    pub fn resolve(&self, role: Role) -> Result<BackendHandle> {
        match self.bindings.get(&role) {
            Some(Binding::Ready { handle, .. }) => Ok(handle.clone()),
            Some(Binding::Unavailable { implementation }) => Err(AppealError::Backend {
                role: role.name().into(),
                message: format!("adapter `{implementation}` is not compiled into this build"),
                retryable: false,
            }),
            None => Err(AppealError::Unbound {
                role: role.name().into(),
                available: available_implementations(role).join(", "),
            }),
        }
    }

    pub fn captioner(&self) -> Result<Arc<dyn Captioner>> {
        match self.resolve(Role::Captioner)? {
            BackendHandle::Captioner(h) => Ok(h),
            _ => unreachable!("bindings are keyed by role"),
        }
    }

    pub fn segmenter(&self) -> Result<Arc<dyn Segmenter>> {
        match self.resolve(Role::Segmenter)? {
            BackendHandle::Segmenter(h) => Ok(h),
            _ => unreachable!("bindings are keyed by role"),
        }
    }

    pub fn inpainter(&self) -> Result<Arc<dyn Inpainter>> {
        match self.resolve(Role::Inpainter)? {
            BackendHandle::Inpainter(h) => Ok(h),
            _ => unreachable!("bindings are keyed by role"),
        }
    }

    pub fn inversion_trainer(&self) -> Result<Arc<dyn InversionTrainer>> {
        match self.resolve(Role::InversionTrainer)? {
            BackendHandle::InversionTrainer(h) => Ok(h),
            _ => unreachable!("bindings are keyed by role"),
        }
    }

    pub fn upscaler(&self) -> Result<Arc<dyn Upscaler>> {
        match self.resolve(Role::Upscaler)? {
            BackendHandle::Upscaler(h) => Ok(h),
            _ => unreachable!("bindings are keyed by role"),
        }
    }

    pub fn depth(&self) -> Result<Arc<dyn DepthEstimator>> {
        match self.resolve(Role::Depth)? {
            BackendHandle::Depth(h) => Ok(h),
            _ => unreachable!("bindings are keyed by role"),
        }
    }

    pub fn encoder_factory(&self) -> Result<EncoderFactory> {
        match self.resolve(Role::Encoder)? {
            BackendHandle::Encoder(h) => Ok(h),
            _ => unreachable!("bindings are keyed by role"),
        }
    }

    pub fn new_encoder(&self) -> Result<Box<dyn ImageEncoder>> {
        Ok((self.encoder_factory()?)())
    }

    pub fn image_source(&self) -> Result<Arc<dyn ImageSource>> {
        match self.resolve(Role::ImageSource)? {
            BackendHandle::ImageSource(h) => Ok(h),
            _ => unreachable!("bindings are keyed by role"),
        }
    }
}

fn mock_handle(role: Role, cfg: &BackendsConfig, sidecar_dir: Option<&Path>) -> Result<BackendHandle> {
    Ok(match role {
        Role::Captioner => {
            let mut c = MockCaptioner::default();
            if let Some(dir) = sidecar_dir {
                c = c.with_sidecar_dir(dir);
            }
            if let Some(fallback) = &cfg.default_caption {
                c = c.with_fallback(fallback.clone());
            }
            BackendHandle::Captioner(Arc::new(c))
        }
        Role::Segmenter => {
            let mut s = MockSegmenter::new();
            if let Some(dir) = sidecar_dir {
                s = s.with_sidecar_dir(dir);
            }
            if let Some(key) = cfg.segmenter_key_color {
                s = s.with_key_color(key);
            }
            BackendHandle::Segmenter(Arc::new(s))
        }
        Role::Inpainter => BackendHandle::Inpainter(Arc::new(if cfg.toy_inpainter {
            MockInpainter::toy()
        } else {
            MockInpainter::new()
        })),
        Role::InversionTrainer => {
            BackendHandle::InversionTrainer(Arc::new(MockInversionTrainer::new(cfg.embedding_dim.unwrap_or(16))))
        }
        Role::Upscaler => {
            let factor = cfg.upscale_factor.unwrap_or(2);
            if factor < 2 {
                return Err(AppealError::validation("backends.upscale_factor", "must be at least 2"));
            }
            BackendHandle::Upscaler(Arc::new(BicubicUpscaler::new(factor)))
        }
        Role::Depth => BackendHandle::Depth(Arc::new(GradientDepth)),
        Role::Encoder => {
            let pc = cfg.projection_config();
            if pc.grid == 0 || pc.dim == 0 {
                return Err(AppealError::validation("backends.encoder_dim", "grid and dim must be positive"));
            }
            BackendHandle::Encoder(Arc::new(move || Box::new(ProjectionEncoder::new(pc.clone())) as Box<dyn ImageEncoder>))
        }
        Role::ImageSource => {
            let corpus = cfg.corpus.clone().ok_or_else(|| {
                AppealError::validation("backends.corpus", "the mock image source needs a corpus directory")
            })?;
            BackendHandle::ImageSource(Arc::new(
                DirectoryImageSource::new(corpus).with_delay(Duration::from_millis(cfg.fetch_delay_ms)),
            ))
        }
    })
}

/// Rebuilds an encoder from a checkpoint snapshot.
pub fn encoder_from_state(state: &EncoderState) -> Result<Box<dyn ImageEncoder>> {
    match state.id.as_str() {
        MOCK_ID => Ok(Box::new(ProjectionEncoder::from_state(state)?)),
        other => Err(AppealError::Backend {
            role: Role::Encoder.name().into(),
            message: format!("cannot restore encoder `{other}` in this build"),
            retryable: false,
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolves_bound_roles() {
        let mut cfg = BackendsConfig::all_mock();
        cfg.image_source = None;
        cfg.depth = None;
        let reg = BackendRegistry::from_config(&cfg, None).unwrap();
        assert!(matches!(reg.resolve(Role::Captioner), Ok(BackendHandle::Captioner(_))));
        assert_eq!(reg.captioner().unwrap().id(), "mock");
        match reg.resolve(Role::Depth) {
            Err(AppealError::Unbound { role, available }) => {
                assert_eq!(role, "depth");
                assert!(available.contains("mock"));
            }
            other => panic!("unexpected {:?}", other.map(|h| h.role())),
        }
    }

    #[test]
    fn reference_profile_is_named_but_unavailable() {
        let cfg: BackendsConfig = toml::from_str(
            r#"
captioner = "blip"
segmenter = "clipseg"
inpainter = "sd-2.1-inpainting-controlnet-depth"
depth = "midas"
[models]
inpainter = "stabilityai/stable-diffusion-2-inpainting"
"#,
        )
        .unwrap();
        let reg = BackendRegistry::from_config(&cfg, None).unwrap();
        assert_eq!(reg.bindings()[&Role::Inpainter], "sd-2.1-inpainting-controlnet-depth");
        let err = reg.inpainter().err().unwrap();
        assert!(!err.is_retryable());
        assert!(err.to_string().contains("not compiled"));
    }

    #[test]
    fn unknown_implementation_is_rejected() {
        let cfg = BackendsConfig {
            captioner: Some("gpt".into()),
            ..BackendsConfig::default()
        };
        let err = BackendRegistry::from_config(&cfg, None).unwrap_err();
        assert!(err.to_string().contains("available"));
    }

    #[test]
    fn mock_source_requires_corpus() {
        assert!(BackendRegistry::from_config(&BackendsConfig::all_mock(), None).is_err());
    }

    #[test]
    fn contracts_cover_every_role() {
        let table = mock_contracts();
        for role in Role::ALL {
            assert!(table.iter().any(|c| c.role == role), "{role}");
        }
        assert!(table.iter().all(|c| c.deterministic && c.reentrant));
    }
}
