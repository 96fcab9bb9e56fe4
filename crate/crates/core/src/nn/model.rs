//! Complete models: the M3 encoder–decoder and the CLaMP dual encoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::Graph;
use super::layers::{CharDecoder, MusicEncoder, TextEncoder};
use super::params::ParamStore;
use super::{Mat, ModelConfig, NnError};
use crate::patch::{PatchSequence, PatchTokens, PATCH_LEN};
use crate::text::{TextTokens, TextVocab};

/// Music encoder plus character decoder.
#[derive(Debug, Clone)]
pub struct M3Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub music: MusicEncoder,
    pub decoder: CharDecoder,
}

impl M3Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, NnError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        MusicEncoder::register(&mut params, &config, &mut rng);
        CharDecoder::register(&mut params, &config, &mut rng);
        Self::from_params(config, params)
    }

    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self, NnError> {
        config.validate()?;
        Ok(Self {
            music: MusicEncoder::bind(&params, &config)?,
            decoder: CharDecoder::bind(&params, &config)?,
            config,
            params,
        })
    }

    /// Full 64-position decoder logits (64 × 98) for one patch given the
    /// contextual feature of its encoder position.
    pub fn decoder_logits(&self, feature: &[f64], target: &PatchTokens) -> Mat {
        let mut g = Graph::new(&self.params);
        let f = g.input(Mat::from_shape_vec((1, feature.len()), feature.to_vec()).expect("row"));
        let logits = self.decoder.forward(&mut g, f, std::slice::from_ref(target), PATCH_LEN);
        g.value(logits).clone()
    }
}

/// Music and text encoders trained jointly.
#[derive(Debug, Clone)]
pub struct ClampModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub vocab: TextVocab,
    pub music: MusicEncoder,
    pub text: TextEncoder,
}

impl ClampModel {
    pub fn new(config: ModelConfig, vocab: TextVocab, seed: u64) -> Result<Self, NnError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        MusicEncoder::register(&mut params, &config, &mut rng);
        TextEncoder::register(&mut params, &config, vocab.len(), &mut rng);
        Self::from_params(config, vocab, params)
    }

    pub fn from_params(config: ModelConfig, vocab: TextVocab, params: ParamStore) -> Result<Self, NnError> {
        config.validate()?;
        let tok = params
            .get("text.tok")
            .ok_or_else(|| NnError::MissingParam("text.tok".into()))?;
        if tok.nrows() != vocab.len() {
            return Err(NnError::Config(format!(
                "text embedding has {} rows but the vocabulary has {} entries",
                tok.nrows(),
                vocab.len()
            )));
        }
        Ok(Self {
            music: MusicEncoder::bind(&params, &config)?,
            text: TextEncoder::bind(&params, &config)?,
            config,
            vocab,
            params,
        })
    }

    /// Copies the music encoder weights out of an M3 model.
    pub fn init_music_from(&mut self, m3: &M3Model) -> Result<usize, NnError> {
        if m3.config.hidden_dim != self.config.hidden_dim
            || m3.config.encoder_layers != self.config.encoder_layers
            || m3.config.max_patches != self.config.max_patches
        {
            return Err(NnError::Config("M3 music encoder shape differs".into()));
        }
        self.params.copy_prefix_from(&m3.params, "music.")
    }

    pub fn dim(&self) -> usize {
        self.config.hidden_dim
    }

    /// Unit-norm music features, one row per sequence (evaluation mode).
    pub fn music_features(&self, seqs: &[&PatchSequence]) -> Result<Mat, NnError> {
        let mut g = Graph::new(&self.params);
        let out = self.music.forward(&mut g, seqs)?;
        let f = out.normalized(&mut g);
        Ok(g.value(f).clone())
    }

    /// Unit-norm text features, one row per text (evaluation mode).
    pub fn text_features(&self, texts: &[&TextTokens]) -> Result<Mat, NnError> {
        let mut g = Graph::new(&self.params);
        let out = self.text.forward(&mut g, texts)?;
        let f = out.normalized(&mut g);
        Ok(g.value(f).clone())
    }

    pub fn tokenize(&self, text: &str) -> TextTokens {
        crate::text::tokenize_text(text, &self.vocab, self.config.max_text_len)
    }
}
