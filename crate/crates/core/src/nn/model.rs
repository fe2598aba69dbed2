//! The acoustic model `f` (score to mel) and the cycle predictor `g`
//! (mel to frame-level phoneme and pitch labels).

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::layers::{Conv1d, Linear, TransformerBlock};
use super::params::{init_normal, ParamId, ParamStore};
use super::NnError;
use crate::score_io::{FrameDurations, MusicScore};
use crate::tensor::Tensor2;

/// Size of the pitch vocabulary (MIDI note numbers 0..=127).
pub const PITCH_VOCAB: usize = 128;
const EMBEDDING_STD: f64 = 0.02;

/// Architecture hyperparameters. Defaults are the desk-scale toy model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub ffn_width: usize,
    pub ffn_kernel: usize,
    pub mel_dims: usize,
    pub postnet_layers: usize,
    pub postnet_channels: usize,
    pub postnet_kernel: usize,
    pub predictor_blocks: usize,
    pub predictor_heads: usize,
    pub predictor_ffn_width: usize,
    pub predictor_positional_encoding: bool,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            encoder_blocks: 2,
            decoder_blocks: 2,
            ffn_width: 256,
            ffn_kernel: 1,
            mel_dims: 80,
            postnet_layers: 3,
            postnet_channels: 64,
            postnet_kernel: 5,
            predictor_blocks: 2,
            predictor_heads: 4,
            predictor_ffn_width: 256,
            predictor_positional_encoding: false,
            dropout: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        let bad = |m: String| Err(NnError::Parameter(m));
        if self.d_model == 0 || self.d_model % 2 != 0 {
            return bad(format!("d_model must be positive and even, got {}", self.d_model));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!("d_model {} does not split across {} heads", self.d_model, self.heads));
        }
        if self.encoder_blocks == 0 || self.decoder_blocks == 0 {
            return bad("encoder and decoder need at least one block each".into());
        }
        if self.predictor_blocks == 0 {
            return bad("predictor needs at least one block".into());
        }
        if self.predictor_heads == 0 || self.mel_dims % self.predictor_heads != 0 {
            return bad(format!(
                "mel_dims {} does not split across {} predictor heads",
                self.mel_dims, self.predictor_heads
            ));
        }
        if self.predictor_positional_encoding && self.mel_dims % 2 != 0 {
            return bad("predictor positional encoding needs even mel_dims".into());
        }
        for (name, k) in [("ffn_kernel", self.ffn_kernel), ("postnet_kernel", self.postnet_kernel)] {
            if k % 2 == 0 {
                return bad(format!("{name} must be odd, got {k}"));
            }
        }
        if self.ffn_width == 0 || self.predictor_ffn_width == 0 || self.mel_dims == 0 {
            return bad("widths must be positive".into());
        }
        if self.postnet_layers > 0 && self.postnet_channels == 0 {
            return bad("postnet_channels must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }

    /// Closed-form acoustic-model size for a phoneme vocabulary of `v`
    /// entries, with `D = d_model`, `F = ffn_width`, `k = ffn_kernel`,
    /// `A = mel_dims`, `C = postnet_channels`, `q = postnet_kernel`:
    ///
    /// ```text
    /// (v + 128) D
    ///   + (E_enc + E_dec) [4 (D^2 + D) + 4 D + (k D F + F) + (k F D + D)]
    ///   + (D A + A)
    ///   + (q A C + C) + (L - 1)(q C C + C) + (C A + A)     (postnet, L >= 1)
    /// ```
    ///
    /// With the defaults and `v = 10` this is 285 920.
    pub fn acoustic_param_count(&self, v: usize) -> usize {
        let d = self.d_model;
        let a = self.mel_dims;
        let c = self.postnet_channels;
        let q = self.postnet_kernel;
        let blocks = (self.encoder_blocks + self.decoder_blocks)
            * TransformerBlock::param_count(d, self.ffn_width, self.ffn_kernel);
        let postnet = if self.postnet_layers == 0 {
            0
        } else {
            Conv1d::param_count(a, c, q)
                + (self.postnet_layers - 1) * Conv1d::param_count(c, c, q)
                + Linear::param_count(c, a)
        };
        (v + PITCH_VOCAB) * d + blocks + Linear::param_count(d, a) + postnet
    }

    /// Closed-form predictor size: two independent stacks of
    /// `P [4 (A^2 + A) + 4 A + (k A F_p + F_p) + (k F_p A + A)]` plus the
    /// heads `(A v + v) + (A 128 + 128)`.
    pub fn predictor_param_count(&self, v: usize) -> usize {
        let a = self.mel_dims;
        2 * self.predictor_blocks * TransformerBlock::param_count(a, self.predictor_ffn_width, self.ffn_kernel)
            + Linear::param_count(a, v)
            + Linear::param_count(a, PITCH_VOCAB)
    }
}

/// Sinusoidal positions: `(t, 2k) = sin(t / 10000^(2k / D))`,
/// `(t, 2k + 1) = cos(t / 10000^(2k / D))`.
pub fn positional_encoding(t: usize, d: usize) -> Result<Tensor2, NnError> {
    if d % 2 != 0 {
        return Err(NnError::Parameter(format!("positional encoding needs an even width, got {d}")));
    }
    let mut pe = Tensor2::zeros(t, d);
    for pos in 0..t {
        for k in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * k as f64 / d as f64);
            pe.set(pos, 2 * k, angle.sin());
            pe.set(pos, 2 * k + 1, angle.cos());
        }
    }
    Ok(pe)
}

/// Repeats row `i` of `h` `durations.frames_per_event[i]` times.
pub fn length_regulate(h: &Tensor2, durations: &FrameDurations) -> Result<Tensor2, NnError> {
    if h.rows != durations.frames_per_event.len() {
        return Err(NnError::Shape(format!(
            "{} token states but {} durations",
            h.rows,
            durations.frames_per_event.len()
        )));
    }
    Ok(durations.expand(&(0..h.rows).collect::<Vec<_>>()).iter().fold(
        Tensor2::zeros(0, h.cols),
        |mut acc, &i| {
            acc.data.extend_from_slice(h.row(i));
            acc.rows += 1;
            acc
        },
    ))
}

/// Transformer encoder/decoder mapping a score to a mel spectrogram.
#[derive(Debug, Clone)]
pub struct AcousticModel {
    pub config: ModelConfig,
    pub vocab_size: usize,
    pub phoneme_embedding: ParamId,
    pub pitch_embedding: ParamId,
    pub encoder: Vec<TransformerBlock>,
    pub decoder: Vec<TransformerBlock>,
    pub output: Linear,
    pub postnet: Vec<Conv1d>,
    pub postnet_output: Option<Linear>,
}

impl AcousticModel {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        config: &ModelConfig,
        vocab_size: usize,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        config.validate()?;
        if vocab_size == 0 {
            return Err(NnError::Parameter("phoneme vocabulary is empty".into()));
        }
        let d = config.d_model;
        let phoneme_embedding = store.insert(
            "acoustic.phoneme_embedding",
            init_normal(vocab_size, d, EMBEDDING_STD, rng),
        );
        let pitch_embedding = store.insert(
            "acoustic.pitch_embedding",
            init_normal(PITCH_VOCAB, d, EMBEDDING_STD, rng),
        );
        let block = |store: &mut ParamStore, name: String, rng: &mut R| {
            TransformerBlock::new(store, &name, d, config.heads, config.ffn_width, config.ffn_kernel, rng)
        };
        let encoder = (0..config.encoder_blocks)
            .map(|i| block(store, format!("acoustic.encoder.{i}"), rng))
            .collect();
        let decoder = (0..config.decoder_blocks)
            .map(|i| block(store, format!("acoustic.decoder.{i}"), rng))
            .collect();
        let output = Linear::new(store, "acoustic.output", d, config.mel_dims, rng);
        let mut postnet = Vec::new();
        for i in 0..config.postnet_layers {
            let d_in = if i == 0 { config.mel_dims } else { config.postnet_channels };
            postnet.push(Conv1d::new(
                store,
                &format!("acoustic.postnet.{i}"),
                d_in,
                config.postnet_channels,
                config.postnet_kernel,
                rng,
            ));
        }
        let postnet_output = (config.postnet_layers > 0).then(|| {
            Linear::new(store, "acoustic.postnet.output", config.postnet_channels, config.mel_dims, rng)
        });
        Ok(Self {
            config: config.clone(),
            vocab_size,
            phoneme_embedding,
            pitch_embedding,
            encoder,
            decoder,
            output,
            postnet,
            postnet_output,
        })
    }

    fn dropout(&self, training: bool) -> f64 {
        if training {
            self.config.dropout
        } else {
            0.0
        }
    }

    /// Builds `Ŷ` (`T x mel_dims`) and the expanded hidden states `H`
    /// (`T x d_model`) for one score.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        score: &MusicScore,
        durations: &FrameDurations,
        training: bool,
        rng: &mut R,
    ) -> Result<(Var, Var), NnError> {
        let h = self.hidden(g, score, durations, training, rng)?;
        let y = self.decode(g, h, training, rng)?;
        Ok((y, h))
    }

    /// Encoder and length regulator: `H = LR(enc(E_ph)) + LR(E_pi) + PE`.
    pub fn hidden<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        score: &MusicScore,
        durations: &FrameDurations,
        training: bool,
        rng: &mut R,
    ) -> Result<Var, NnError> {
        let n = score.events.len();
        if n == 0 {
            return Err(NnError::Shape("score has no events".into()));
        }
        if durations.frames_per_event.len() != n {
            return Err(NnError::Shape(format!(
                "{n} events but {} durations",
                durations.frames_per_event.len()
            )));
        }
        let phonemes = score.phonemes();
        if let Some(&bad) = phonemes.iter().find(|&&p| p >= self.vocab_size) {
            return Err(NnError::Vocabulary(format!(
                "phoneme id {bad} outside a vocabulary of {}",
                self.vocab_size
            )));
        }
        let pitches: Vec<usize> = score.pitches().iter().map(|&p| p as usize).collect();
        if let Some(&bad) = pitches.iter().find(|&&p| p >= PITCH_VOCAB) {
            return Err(NnError::Vocabulary(format!("pitch {bad} outside 0..128")));
        }
        let d = self.config.d_model;
        let dropout = self.dropout(training);

        let table = g.param(self.phoneme_embedding);
        let tokens = g.gather(table, &phonemes);
        let token_pe = g.constant(positional_encoding(n, d)?);
        let mut x = g.add(tokens, token_pe);
        for block in &self.encoder {
            x = block.forward(g, x, dropout, rng);
        }
        let counts = &durations.frames_per_event;
        let h_ph = g.repeat_rows(x, counts);
        let pitch_table = g.param(self.pitch_embedding);
        let pitch_tokens = g.gather(pitch_table, &pitches);
        let h_pi = g.repeat_rows(pitch_tokens, counts);
        let frame_pe = g.constant(positional_encoding(durations.total_frames, d)?);
        let sum = g.add(h_ph, h_pi);
        Ok(g.add(sum, frame_pe))
    }

    /// Decoder, output projection and residual postnet applied to hidden
    /// states `h` (`T x d_model`).
    pub fn decode<R: Rng + ?Sized>(&self, g: &mut Graph, h: Var, training: bool, rng: &mut R) -> Result<Var, NnError> {
        let width = g.value(h).cols;
        if width != self.config.d_model {
            return Err(NnError::Shape(format!(
                "hidden width {width}, model expects {}",
                self.config.d_model
            )));
        }
        let dropout = self.dropout(training);
        let mut x = h;
        for block in &self.decoder {
            x = block.forward(g, x, dropout, rng);
        }
        let coarse = self.output.forward(g, x);
        let Some(post_out) = &self.postnet_output else {
            return Ok(coarse);
        };
        let mut z = coarse;
        for conv in &self.postnet {
            z = conv.forward(g, z);
            z = g.tanh(z);
            z = g.dropout(z, dropout, rng);
        }
        let residual = post_out.forward(g, z);
        Ok(g.add(coarse, residual))
    }

    /// Evaluation-mode prediction of the mel spectrogram.
    pub fn infer(&self, store: &ParamStore, score: &MusicScore, durations: &FrameDurations) -> Result<Tensor2, NnError> {
        let mut g = Graph::new(store);
        let mut no_rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let (y, _) = self.forward(&mut g, score, durations, false, &mut no_rng)?;
        Ok(g.value(y).clone())
    }
}

/// Phoneme and pitch recognizers over mel frames, as two independent
/// transformer stacks with linear classification heads.
#[derive(Debug, Clone)]
pub struct PredictorModule {
    pub config: ModelConfig,
    pub vocab_size: usize,
    pub phoneme_stack: Vec<TransformerBlock>,
    pub pitch_stack: Vec<TransformerBlock>,
    pub phoneme_head: Linear,
    pub pitch_head: Linear,
}

impl PredictorModule {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        config: &ModelConfig,
        vocab_size: usize,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        config.validate()?;
        let a = config.mel_dims;
        let stack = |store: &mut ParamStore, name: &str, rng: &mut R| -> Vec<TransformerBlock> {
            (0..config.predictor_blocks)
                .map(|i| {
                    TransformerBlock::new(
                        store,
                        &format!("predictor.{name}.{i}"),
                        a,
                        config.predictor_heads,
                        config.predictor_ffn_width,
                        config.ffn_kernel,
                        rng,
                    )
                })
                .collect()
        };
        let phoneme_stack = stack(store, "phoneme", rng);
        let pitch_stack = stack(store, "pitch", rng);
        let phoneme_head = Linear::new(store, "predictor.phoneme_head", a, vocab_size, rng);
        let pitch_head = Linear::new(store, "predictor.pitch_head", a, PITCH_VOCAB, rng);
        Ok(Self {
            config: config.clone(),
            vocab_size,
            phoneme_stack,
            pitch_stack,
            phoneme_head,
            pitch_head,
        })
    }

    /// Frame-level phoneme logits (`T x V`) and pitch logits (`T x 128`).
    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        y: Var,
        training: bool,
        rng: &mut R,
    ) -> Result<(Var, Var), NnError> {
        let (t, width) = g.value(y).shape();
        if width != self.config.mel_dims {
            return Err(NnError::Shape(format!(
                "feature width {width}, predictor expects {}",
                self.config.mel_dims
            )));
        }
        let dropout = if training { self.config.dropout } else { 0.0 };
        let input = if self.config.predictor_positional_encoding {
            let pe = g.constant(positional_encoding(t, width)?);
            g.add(y, pe)
        } else {
            y
        };
        let mut ph = input;
        for block in &self.phoneme_stack {
            ph = block.forward(g, ph, dropout, rng);
        }
        let mut pi = input;
        for block in &self.pitch_stack {
            pi = block.forward(g, pi, dropout, rng);
        }
        let ph_logits = self.phoneme_head.forward(g, ph);
        let pi_logits = self.pitch_head.forward(g, pi);
        Ok((ph_logits, pi_logits))
    }
}

/// Both networks sharing one parameter store.
#[derive(Debug, Clone)]
pub struct Networks {
    pub store: ParamStore,
    pub acoustic: AcousticModel,
    pub predictor: PredictorModule,
}

impl Networks {
    /// Builds and initializes both networks. Parameters are rounded to
    /// 32-bit precision so that checkpoints reproduce them exactly.
    pub fn new<R: Rng + ?Sized>(config: &ModelConfig, vocab_size: usize, rng: &mut R) -> Result<Self, NnError> {
        let mut store = ParamStore::default();
        let acoustic = AcousticModel::new(&mut store, config, vocab_size, rng)?;
        let predictor = PredictorModule::new(&mut store, config, vocab_size, rng)?;
        store.snap_to_f32();
        Ok(Self {
            store,
            acoustic,
            predictor,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::score_io::ScoreEvent;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_score() -> (MusicScore, FrameDurations) {
        let events = vec![
            ScoreEvent { phoneme: 0, pitch: 0, onset: 0.0, offset: 0.1 },
            ScoreEvent { phoneme: 3, pitch: 60, onset: 0.1, offset: 0.3 },
            ScoreEvent { phoneme: 5, pitch: 62, onset: 0.3, offset: 0.45 },
        ];
        let score = MusicScore { phrase_id: "t".into(), events };
        let d = FrameDurations::new(vec![2, 4, 3]);
        (score, d)
    }

    fn small_config() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            heads: 2,
            encoder_blocks: 1,
            decoder_blocks: 1,
            ffn_width: 24,
            ffn_kernel: 3,
            mel_dims: 8,
            postnet_layers: 2,
            postnet_channels: 6,
            postnet_kernel: 3,
            predictor_blocks: 1,
            predictor_heads: 2,
            predictor_ffn_width: 12,
            predictor_positional_encoding: false,
            dropout: 0.1,
        }
    }

    #[test]
    fn positional_encoding_cases() {
        let pe = positional_encoding(6, 8).unwrap();
        for k in 0..4 {
            assert_eq!(pe.get(0, 2 * k), 0.0);
            assert_eq!(pe.get(0, 2 * k + 1), 1.0);
        }
        assert!((pe.get(1, 0) - 0.84147).abs() < 1e-5);
        assert!(pe.data.iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(matches!(positional_encoding(3, 5), Err(NnError::Parameter(_))));
    }

    #[test]
    fn length_regulation_cases() {
        let h = Tensor2::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        assert_eq!(length_regulate(&h, &FrameDurations::new(vec![1, 1])).unwrap(), h);
        let out = length_regulate(&h, &FrameDurations::new(vec![2, 3])).unwrap();
        assert_eq!(out.rows, 5);
        assert_eq!(out.row(0), h.row(0));
        assert_eq!(out.row(1), h.row(0));
        // Row 4 lies past the first token's two frames.
        assert_eq!(out.row(4), h.row(1));
        assert!(matches!(
            length_regulate(&h, &FrameDurations::new(vec![1])),
            Err(NnError::Shape(_))
        ));
    }

    #[test]
    fn parameter_count_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = ModelConfig::default();
        let nets = Networks::new(&cfg, 10, &mut rng).unwrap();
        let acoustic: usize = nets
            .store
            .ids_with_prefix("acoustic.")
            .map(|id| nets.store.value(id).len())
            .sum();
        let predictor: usize = nets
            .store
            .ids_with_prefix("predictor.")
            .map(|id| nets.store.value(id).len())
            .sum();
        assert_eq!(acoustic, cfg.acoustic_param_count(10));
        assert_eq!(acoustic, 285_920);
        assert_eq!(predictor, cfg.predictor_param_count(10));
        let small = small_config();
        let nets = Networks::new(&small, 7, &mut rng).unwrap();
        assert_eq!(
            nets.store.scalar_count(),
            small.acoustic_param_count(7) + small.predictor_param_count(7)
        );
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let nets = Networks::new(&small_config(), 7, &mut rng).unwrap();
        let (score, d) = toy_score();
        let y1 = nets.acoustic.infer(&nets.store, &score, &d).unwrap();
        let y2 = nets.acoustic.infer(&nets.store, &score, &d).unwrap();
        assert_eq!(y1.shape(), (9, 8));
        assert!(y1.data.iter().zip(&y2.data).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn zero_parameters_give_constant_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut nets = Networks::new(&small_config(), 7, &mut rng).unwrap();
        nets.store.zero_all();
        let (score, d) = toy_score();
        let y = nets.acoustic.infer(&nets.store, &score, &d).unwrap();
        let mut other = score.clone();
        other.events[1].phoneme = 6;
        other.events[2].pitch = 70;
        let y2 = nets.acoustic.infer(&nets.store, &other, &d).unwrap();
        assert_eq!(y, y2);
        assert!(y.data.iter().all(|&v| v == y.data[0]));
    }

    #[test]
    fn decode_of_hidden_reproduces_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let nets = Networks::new(&small_config(), 7, &mut rng).unwrap();
        let (score, d) = toy_score();
        let mut g = Graph::new(&nets.store);
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let h = nets.acoustic.hidden(&mut g, &score, &d, true, &mut r1).unwrap();
        let mut r2 = r1.clone();
        let y = nets.acoustic.decode(&mut g, h, true, &mut r1).unwrap();
        let h_copy = g.constant(g.value(h).clone());
        let y2 = nets.acoustic.decode(&mut g, h_copy, true, &mut r2).unwrap();
        assert_eq!(g.value(y), g.value(y2));
        let bad = g.constant(Tensor2::zeros(3, 5));
        assert!(matches!(
            nets.acoustic.decode(&mut g, bad, false, &mut r2),
            Err(NnError::Shape(_))
        ));
    }

    #[test]
    fn unknown_phoneme_is_a_vocabulary_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let nets = Networks::new(&small_config(), 7, &mut rng).unwrap();
        let (mut score, d) = toy_score();
        score.events[1].phoneme = 7;
        assert!(matches!(
            nets.acoustic.infer(&nets.store, &score, &d),
            Err(NnError::Vocabulary(_))
        ));
    }

    #[test]
    fn predictor_shapes_and_permutation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // Frame-wise feed-forward; wider kernels mix neighbouring frames.
        let cfg = ModelConfig {
            ffn_kernel: 1,
            ..small_config()
        };
        let nets = Networks::new(&cfg, 7, &mut rng).unwrap();
        let y = Tensor2::from_vec(3, 8, (0..24).map(|i| ((i * 5) % 7) as f64 * 0.4 - 1.0).collect());
        let perm = [2usize, 0, 1];
        let run = |input: Tensor2| {
            let mut g = Graph::new(&nets.store);
            let v = g.constant(input);
            let mut r = ChaCha8Rng::seed_from_u64(0);
            let (a, b) = nets.predictor.forward(&mut g, v, false, &mut r).unwrap();
            (g.value(a).clone(), g.value(b).clone())
        };
        let (ph, pi) = run(y.clone());
        assert_eq!(ph.shape(), (3, 7));
        assert_eq!(pi.shape(), (3, 128));
        let (ph_p, pi_p) = run(y.select_rows(&perm));
        assert!(ph_p.max_abs_diff(&ph.select_rows(&perm)) < 1e-12);
        assert!(pi_p.max_abs_diff(&pi.select_rows(&perm)) < 1e-12);
        let mut g = Graph::new(&nets.store);
        let bad = g.constant(Tensor2::zeros(3, 5));
        let mut r = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(nets.predictor.forward(&mut g, bad, false, &mut r), Err(NnError::Shape(_))));
    }
}
