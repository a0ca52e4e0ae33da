//! The full guided-generation pipeline: concept extraction, separate span
//! encoding, re-alignment, classifier-free guidance with structured
//! cross-attention fusion, PLMS/DDPM sampling, and the toy latent decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::alignment::{
    kept_indices, naive_expand, padding_keep_mask, realign, AlignmentMode, PaddingPattern,
};
use crate::attention::{FusionMode, FusionOptions};
use crate::checkpoint::ModelWeights;
use crate::embedding::EmbeddingSequence;
use crate::error::{Result, SdgError};
use crate::imageio::Image;
use crate::mat::Mat;
use crate::prompt::{concept_set, locate_span, ConceptSpan, ParserSource};
use crate::sampler::{ddpm_step, PlmsState, SamplerKind};
use crate::schedule::NoiseSchedule;
use crate::unet::{LayerMaps, LATENT_SIZE};
use crate::vocab::{tokenize, TokenSequence, Vocabulary};
use crate::Real;

pub const IMAGE_SIZE: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub sampler: SamplerKind,
    pub guidance_scale: Real,
    pub beta_start: f64,
    pub beta_end: f64,
    /// How many equally spaced steps keep their attention maps.
    pub record_steps: usize,
    pub record_latents: bool,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig {
            steps: 50,
            sampler: SamplerKind::Plms,
            guidance_scale: 7.5,
            beta_start: 0.01,
            beta_end: 0.2,
            record_steps: 5,
            record_latents: false,
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(SdgError::Config("steps must be >= 1".into()));
        }
        if self.guidance_scale < 0.0 {
            return Err(SdgError::Config("guidance scale must be >= 0".into()));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule<Real>> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

/// How the conditional noise estimate is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GuidanceMethod {
    Fusion(FusionMode),
    Composable,
}

impl GuidanceMethod {
    pub fn parse(s: &str) -> Option<GuidanceMethod> {
        match s {
            "compose" | "composable" => Some(GuidanceMethod::Composable),
            _ => FusionMode::parse(s).map(GuidanceMethod::Fusion),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            GuidanceMethod::Fusion(m) => m.as_str(),
            GuidanceMethod::Composable => "compose",
        }
    }

    pub const ALL: [GuidanceMethod; 4] = [
        GuidanceMethod::Fusion(FusionMode::Baseline),
        GuidanceMethod::Fusion(FusionMode::MultiValue),
        GuidanceMethod::Fusion(FusionMode::MultiKey),
        GuidanceMethod::Composable,
    ];
}

#[derive(Debug, Clone)]
pub struct SampleRequest {
    pub prompt: String,
    pub method: GuidanceMethod,
    pub parser: ParserSource,
    pub alignment: AlignmentMode,
    pub padding: PaddingPattern,
    pub seed: u64,
}

impl SampleRequest {
    pub fn new(prompt: &str, method: GuidanceMethod, seed: u64) -> SampleRequest {
        SampleRequest {
            prompt: prompt.to_string(),
            method,
            parser: ParserSource::Chunker,
            alignment: AlignmentMode::Realign,
            padding: PaddingPattern::Full,
            seed,
        }
    }
}

/// Attention maps kept for one recorded timestep.
#[derive(Debug, Clone)]
pub struct StepMaps {
    pub t: usize,
    pub layers: LayerMaps<Real>,
}

#[derive(Debug, Clone)]
pub struct GenerationRecord {
    pub prompt: String,
    pub mode: String,
    pub concepts: Vec<String>,
    pub seed: u64,
    pub steps: usize,
    pub guidance_scale: Real,
    /// (t, latent) pairs, populated when `record_latents` is set; the final
    /// z^0 is always last.
    pub latents: Vec<(usize, Vec<Real>)>,
    pub attention: Vec<StepMaps>,
    pub z0: Vec<Real>,
    pub image: Image,
}

/// 4x average pooling of `2*x - 1` per RGB channel; the fourth latent
/// channel is zero.
pub fn encode_image(img: &Image) -> Vec<Real> {
    assert_eq!((img.width, img.height), (IMAGE_SIZE, IMAGE_SIZE));
    let chw = img.to_float_chw();
    let hw = LATENT_SIZE * LATENT_SIZE;
    let mut z = vec![0.0; 4 * hw];
    for c in 0..3 {
        for y in 0..LATENT_SIZE {
            for x in 0..LATENT_SIZE {
                let mut acc = 0.0;
                for dy in 0..4 {
                    for dx in 0..4 {
                        acc += chw[c * IMAGE_SIZE * IMAGE_SIZE
                            + (4 * y + dy) * IMAGE_SIZE
                            + 4 * x + dx];
                    }
                }
                z[c * hw + y * LATENT_SIZE + x] = 2.0 * (acc / 16.0) - 1.0;
            }
        }
    }
    z
}

/// Inverse of [`encode_image`] up to pooling: nearest-neighbor 4x upsample,
/// affine map back to [0,1], clamp. The fourth channel is ignored.
pub fn decode_latent(z: &[Real]) -> Image {
    let hw = LATENT_SIZE * LATENT_SIZE;
    assert_eq!(z.len(), 4 * hw);
    let mut chw = vec![0.0; 3 * IMAGE_SIZE * IMAGE_SIZE];
    for c in 0..3 {
        for y in 0..IMAGE_SIZE {
            for x in 0..IMAGE_SIZE {
                let v = z[c * hw + (y / 4) * LATENT_SIZE + x / 4];
                chw[c * IMAGE_SIZE * IMAGE_SIZE + y * IMAGE_SIZE + x] =
                    ((v + 1.0) / 2.0).clamp(0.0, 1.0);
            }
        }
    }
    Image::from_float_chw(&chw, IMAGE_SIZE, IMAGE_SIZE)
}

/// Conditioning resolved to raw context matrices, ready for the denoiser.
enum PreparedCond {
    Fusion {
        prompt_ctx: Mat<Real>,
        spans: Vec<Mat<Real>>,
        mode: FusionMode,
    },
    Composable {
        segments: Vec<Mat<Real>>,
    },
}

pub struct Pipeline {
    pub model: ModelWeights,
    pub vocab: Vocabulary,
    pub config: DiffusionConfig,
    pub fusion_opts: FusionOptions<Real>,
}

impl Pipeline {
    pub fn new(model: ModelWeights, vocab: Vocabulary, config: DiffusionConfig) -> Pipeline {
        Pipeline { model, vocab, config, fusion_opts: FusionOptions::default() }
    }

    /// The z^T draw for a seed; separate so callers can share it.
    pub fn initial_latent(&self, seed: u64) -> Vec<Real> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        draw_normal(&mut rng, 4 * LATENT_SIZE * LATENT_SIZE)
    }

    fn encode_tokens(&self, tokens: &TokenSequence) -> Result<EmbeddingSequence<Real>> {
        self.model.encoder.encode(tokens)
    }

    fn encode_prompt(&self, prompt: &str) -> Result<EmbeddingSequence<Real>> {
        self.encode_tokens(&tokenize(prompt, &self.vocab)?)
    }

    fn uncond_ctx(&self) -> Result<Mat<Real>> {
        Ok(self
            .encode_tokens(&TokenSequence::empty(&self.vocab))?
            .data()
            .clone())
    }

    /// Builds the conditional context matrices for a request. Returns the
    /// prepared conditioning and the located concept texts.
    fn prepare(&self, req: &SampleRequest) -> Result<(PreparedCond, Vec<String>)> {
        if let GuidanceMethod::Composable = req.method {
            let segments = split_on_and(&req.prompt);
            let mats = segments
                .iter()
                .map(|s| Ok(self.encode_prompt(s)?.data().clone()))
                .collect::<Result<Vec<_>>>()?;
            return Ok((PreparedCond::Composable { segments: mats }, segments));
        }
        let GuidanceMethod::Fusion(mode) = req.method else { unreachable!() };

        let tokens = tokenize(&req.prompt, &self.vocab)?;
        let concepts = concept_set(&req.prompt, &req.parser, &tokens, &self.vocab)?;
        let full = self.encode_tokens(&tokens)?;

        let mut span_seqs = Vec::with_capacity(concepts.spans.len());
        for span in &concepts.spans {
            let span_tokens = tokenize(&span.text, &self.vocab)?;
            let span_enc = self.encode_tokens(&span_tokens)?;
            let aligned = match req.alignment {
                AlignmentMode::Realign => realign(&full, &span_enc, span)?,
                AlignmentMode::NaiveExpand => naive_expand(&span_enc),
            };
            span_seqs.push(aligned);
        }

        // The keep-mask is computed from the full prompt and applied to the
        // prompt context and every span context so key rows stay aligned.
        let keep = kept_indices(&padding_keep_mask(full.content_len(), req.padding));
        let prompt_ctx = full.data().select_rows(&keep);
        let spans = span_seqs
            .iter()
            .map(|s| s.data().select_rows(&keep))
            .collect();
        let texts = concepts.spans.iter().map(|s| s.text.clone()).collect();
        Ok((PreparedCond::Fusion { prompt_ctx, spans, mode }, texts))
    }

    /// One guided noise estimate. Returns the conditional branch's attention
    /// maps so callers can subsample them.
    fn guided_eps(
        &self,
        z: &[Real],
        t: usize,
        cond: &PreparedCond,
        uncond: &Mat<Real>,
    ) -> Result<(Vec<Real>, LayerMaps<Real>)> {
        let s = self.config.guidance_scale;
        let (eps_u, _) = self.model.unet.predict_noise(
            z,
            t,
            uncond,
            &[],
            FusionMode::Baseline,
            &self.fusion_opts,
        )?;
        match cond {
            PreparedCond::Fusion { prompt_ctx, spans, mode } => {
                let (eps_c, maps) = self.model.unet.predict_noise(
                    z,
                    t,
                    prompt_ctx,
                    spans,
                    *mode,
                    &self.fusion_opts,
                )?;
                let eps = eps_u
                    .iter()
                    .zip(eps_c.iter())
                    .map(|(&u, &c)| u + s * (c - u))
                    .collect();
                Ok((eps, maps))
            }
            PreparedCond::Composable { segments } => {
                let inv_j = 1.0 / segments.len() as Real;
                let mut eps = eps_u.clone();
                let mut maps = Vec::new();
                for seg in segments {
                    let (eps_j, m) = self.model.unet.predict_noise(
                        z,
                        t,
                        seg,
                        &[],
                        FusionMode::Baseline,
                        &self.fusion_opts,
                    )?;
                    if maps.is_empty() {
                        maps = m;
                    }
                    for ((e, &u), &j) in eps.iter_mut().zip(eps_u.iter()).zip(eps_j.iter()) {
                        *e += s * (j - u) * inv_j;
                    }
                }
                Ok((eps, maps))
            }
        }
    }

    pub fn sample(&self, req: &SampleRequest) -> Result<GenerationRecord> {
        self.sample_from(req, None)
    }

    /// Like [`Pipeline::sample`] but optionally overriding z^T (per-step DDPM
    /// noise still comes from the request's seed).
    pub fn sample_from(
        &self,
        req: &SampleRequest,
        zt_override: Option<Vec<Real>>,
    ) -> Result<GenerationRecord> {
        let (cond, concepts) = self.prepare(req)?;
        let uncond = self.uncond_ctx()?;
        let (z0, latents, attention) =
            self.run_diffusion(&cond, &uncond, req.seed, zt_override)?;
        let image = decode_latent(&z0);
        Ok(GenerationRecord {
            prompt: req.prompt.clone(),
            mode: req.method.as_str().to_string(),
            concepts,
            seed: req.seed,
            steps: self.config.steps,
            guidance_scale: self.config.guidance_scale,
            latents,
            attention,
            z0,
            image,
        })
    }

    /// Substitution case study: generate from the naive prompt as-is and with the
    /// shared span's rows overwritten by the complex prompt's rows for the
    /// same tokens, from one shared z^T.
    pub fn substitution_experiment(
        &self,
        naive: &str,
        complex: &str,
        shared_span: &str,
        seed: u64,
    ) -> Result<(GenerationRecord, GenerationRecord)> {
        let naive_tokens = tokenize(naive, &self.vocab)?;
        let complex_tokens = tokenize(complex, &self.vocab)?;
        let span_a = locate_first(shared_span, &naive_tokens, &self.vocab)?;
        let span_b = locate_first(shared_span, &complex_tokens, &self.vocab)?;
        let enc_a = self.encode_tokens(&naive_tokens)?;
        let enc_b = self.encode_tokens(&complex_tokens)?;

        let mut substituted = enc_a.data().clone();
        for i in 0..span_a.len() {
            substituted.set_row(
                span_a.token_start + i,
                enc_b.data().row(span_b.token_start + i),
            );
        }

        let uncond = self.uncond_ctx()?;
        let zt = self.initial_latent(seed);
        let run = |ctx: Mat<Real>, tag: &str| -> Result<GenerationRecord> {
            let cond = PreparedCond::Fusion {
                prompt_ctx: ctx,
                spans: Vec::new(),
                mode: FusionMode::Baseline,
            };
            let (z0, latents, attention) =
                self.run_diffusion(&cond, &uncond, seed, Some(zt.clone()))?;
            let image = decode_latent(&z0);
            Ok(GenerationRecord {
                prompt: format!("{naive} [{tag}]"),
                mode: "base".to_string(),
                concepts: vec![shared_span.to_string()],
                seed,
                steps: self.config.steps,
                guidance_scale: self.config.guidance_scale,
                latents,
                attention,
                z0,
                image,
            })
        };
        let plain = run(enc_a.data().clone(), "naive")?;
        let swapped = run(substituted, "substituted")?;
        Ok((plain, swapped))
    }

    /// Timesteps whose attention maps are kept: `record_steps` values evenly
    /// spaced from T down to 1.
    pub fn recorded_timesteps(&self) -> Vec<usize> {
        let t_max = self.config.steps;
        let n = self.config.record_steps.min(t_max).max(1);
        if n == 1 {
            return vec![t_max];
        }
        let mut ts: Vec<usize> = (0..n)
            .map(|i| {
                let f = i as f64 / (n - 1) as f64;
                ((t_max as f64) - f * (t_max as f64 - 1.0)).round() as usize
            })
            .collect();
        ts.dedup();
        ts
    }

    #[allow(clippy::type_complexity)]
    fn run_diffusion(
        &self,
        cond: &PreparedCond,
        uncond: &Mat<Real>,
        seed: u64,
        zt_override: Option<Vec<Real>>,
    ) -> Result<(Vec<Real>, Vec<(usize, Vec<Real>)>, Vec<StepMaps>)> {
        self.config.validate()?;
        let schedule = self.config.schedule()?;
        let t_max = self.config.steps;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let drawn = draw_normal(&mut rng, 4 * LATENT_SIZE * LATENT_SIZE);
        let mut z = zt_override.unwrap_or(drawn);
        let record_ts = self.recorded_timesteps();

        let mut latents = Vec::new();
        let mut attention = Vec::new();
        if self.config.record_latents {
            latents.push((t_max, z.clone()));
        }
        let mut plms = PlmsState::new();
        for t in (1..=t_max).rev() {
            let (eps, maps) = self.guided_eps(&z, t, cond, uncond)?;
            if record_ts.contains(&t) {
                attention.push(StepMaps { t, layers: maps });
            }
            z = match self.config.sampler {
                SamplerKind::Plms => plms.step(&z, &eps, &schedule, t, |zm, tm| {
                    Ok(self.guided_eps(zm, tm, cond, uncond)?.0)
                })?,
                SamplerKind::Ddpm => {
                    let noise = if t > 1 {
                        draw_normal(&mut rng, z.len())
                    } else {
                        vec![0.0; z.len()]
                    };
                    ddpm_step(&z, &eps, &schedule, t, &noise)
                }
            };
            if !z.iter().all(|v| v.is_finite()) {
                return Err(SdgError::Config(format!("latent diverged at t={t}")));
            }
            if self.config.record_latents {
                latents.push((t - 1, z.clone()));
            }
        }
        Ok((z, latents, attention))
    }
}

fn draw_normal(rng: &mut ChaCha8Rng, n: usize) -> Vec<Real> {
    (0..n)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            v as Real
        })
        .collect()
}

/// Leftmost occurrence of `span_text`, ignoring prior uses.
fn locate_first(
    span_text: &str,
    tokens: &TokenSequence,
    vocab: &Vocabulary,
) -> Result<ConceptSpan> {
    let mut used = std::collections::BTreeSet::new();
    locate_span(span_text, tokens, &mut used, vocab)
}

/// Splits a prompt into segments on the standalone word "and".
pub fn split_on_and(prompt: &str) -> Vec<String> {
    let words = crate::vocab::normalize_words(prompt);
    let mut segments = Vec::new();
    let mut current: Vec<String> = Vec::new();
    for w in words {
        if w == "and" {
            if !current.is_empty() {
                segments.push(current.join(" "));
                current = Vec::new();
            }
        } else {
            current.push(w);
        }
    }
    if !current.is_empty() {
        segments.push(current.join(" "));
    }
    if segments.is_empty() {
        segments.push(String::new());
    }
    segments
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::checkpoint::ModelWeights;
    use crate::encoder::{init_encoder, EncoderConfig};
    use crate::unet::{init_unet, UnetConfig};
    use crate::vocab::test_vocab;

    pub(crate) fn tiny_pipeline(steps: usize) -> Pipeline {
        let vocab = test_vocab();
        let encoder = init_encoder(&EncoderConfig {
            vocab_size: vocab.len(),
            embed_dim: 16,
            num_layers: 1,
            num_heads: 2,
            ff_dim: 32,
            seed: 11,
        })
        .unwrap();
        let unet = init_unet(&UnetConfig {
            latent_channels: 4,
            base_channels: 16,
            context_dim: 16,
            head_dim: 8,
            time_dim: 16,
            seed: 12,
        })
        .unwrap();
        Pipeline::new(
            ModelWeights { encoder, unet },
            vocab,
            DiffusionConfig { steps, ..DiffusionConfig::default() },
        )
    }

    #[test]
    fn split_on_and_segments() {
        assert_eq!(
            split_on_and("a white sheep and a red car"),
            vec!["a white sheep", "a red car"]
        );
        assert_eq!(split_on_and("a red apple"), vec!["a red apple"]);
    }

    #[test]
    fn encode_decode_image_round_trip_on_flat_blocks() {
        // Block-constant images survive pool + upsample exactly (up to u8).
        let mut img = Image::new(IMAGE_SIZE, IMAGE_SIZE);
        for y in 0..IMAGE_SIZE {
            for x in 0..IMAGE_SIZE {
                let v = (((x / 4) * 16 + (y / 4) * 8) % 256) as u8;
                img.set_pixel(x, y, [v, 255 - v, 128]);
            }
        }
        let back = decode_latent(&encode_image(&img));
        for (a, b) in img.rgb.iter().zip(back.rgb.iter()) {
            assert!((*a as i32 - *b as i32).abs() <= 1, "{a} vs {b}");
        }
    }

    #[test]
    fn sample_is_seed_deterministic() {
        let p = tiny_pipeline(3);
        let req = SampleRequest::new(
            "a red apple and a yellow banana",
            GuidanceMethod::Fusion(FusionMode::MultiValue),
            0,
        );
        let a = p.sample(&req).unwrap();
        let b = p.sample(&req).unwrap();
        assert_eq!(a.image.rgb, b.image.rgb);
        assert_eq!(a.z0, b.z0);
        let mut req2 = req.clone();
        req2.seed = 1;
        let c = p.sample(&req2).unwrap();
        assert_ne!(a.image.rgb, c.image.rgb);
        assert_eq!(a.concepts, vec!["a red apple", "a yellow banana"]);
    }

    #[test]
    fn structured_reduces_to_baseline_without_concepts() {
        let p = tiny_pipeline(3);
        // No noun in the lexicon pattern -> chunker yields no spans.
        let base = p
            .sample(&SampleRequest::new(
                "running quickly",
                GuidanceMethod::Fusion(FusionMode::Baseline),
                7,
            ))
            .unwrap();
        for mode in [FusionMode::MultiValue, FusionMode::MultiKey] {
            let got = p
                .sample(&SampleRequest::new(
                    "running quickly",
                    GuidanceMethod::Fusion(mode),
                    7,
                ))
                .unwrap();
            assert_eq!(base.image.rgb, got.image.rgb);
        }
    }

    #[test]
    fn composable_single_segment_equals_baseline() {
        let p = tiny_pipeline(3);
        let base = p
            .sample(&SampleRequest::new(
                "a red apple",
                GuidanceMethod::Fusion(FusionMode::Baseline),
                4,
            ))
            .unwrap();
        // One segment: compose_scores degrades to plain cfg. The chunker
        // found a span though, so force no spans by comparing through the
        // composable path.
        let comp = p
            .sample(&SampleRequest::new("a red apple", GuidanceMethod::Composable, 4))
            .unwrap();
        assert_eq!(base.image.rgb, comp.image.rgb);
    }

    #[test]
    fn ddpm_and_plms_agree_on_single_step() {
        let mut p = tiny_pipeline(1);
        let req = SampleRequest::new(
            "a white sheep",
            GuidanceMethod::Fusion(FusionMode::Baseline),
            9,
        );
        p.config.sampler = SamplerKind::Plms;
        let a = p.sample(&req).unwrap();
        p.config.sampler = SamplerKind::Ddpm;
        let b = p.sample(&req).unwrap();
        assert_eq!(a.image.rgb, b.image.rgb);
    }

    #[test]
    fn records_attention_at_equal_intervals() {
        let p = tiny_pipeline(9);
        let req = SampleRequest::new(
            "a red apple",
            GuidanceMethod::Fusion(FusionMode::MultiValue),
            2,
        );
        let rec = p.sample(&req).unwrap();
        let ts: Vec<usize> = rec.attention.iter().map(|s| s.t).collect();
        assert_eq!(ts, vec![9, 7, 5, 3, 1]);
        // Three cross-attention layers each step.
        assert!(rec.attention.iter().all(|s| s.layers.len() == 3));
    }

    #[test]
    fn substitution_identity_when_prompts_match() {
        let p = tiny_pipeline(2);
        let (a, b) = p
            .substitution_experiment("a red apple", "a red apple", "a red apple", 5)
            .unwrap();
        assert_eq!(a.image.rgb, b.image.rgb);
    }

    #[test]
    fn substitution_changes_output_for_different_context() {
        let p = tiny_pipeline(2);
        let (a, b) = p
            .substitution_experiment(
                "a red apple",
                "a green bag and a red apple",
                "a red apple",
                5,
            )
            .unwrap();
        assert_ne!(a.image.rgb, b.image.rgb);
    }

    #[test]
    fn padding_patterns_change_output_but_keep_determinism() {
        let p = tiny_pipeline(2);
        let mut req = SampleRequest::new(
            "a red apple",
            GuidanceMethod::Fusion(FusionMode::Baseline),
            3,
        );
        let full = p.sample(&req).unwrap();
        req.padding = PaddingPattern::NoPad;
        let nopad1 = p.sample(&req).unwrap();
        let nopad2 = p.sample(&req).unwrap();
        assert_eq!(nopad1.image.rgb, nopad2.image.rgb);
        assert_ne!(full.image.rgb, nopad1.image.rgb);
    }
}
