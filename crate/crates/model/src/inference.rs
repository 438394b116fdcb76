//! Sampling: scores and performances from the prior, and performances of
//! given scores.
//!
//! Decoding runs step by step over a batch of independent rows, one
//! sub-token at a time. Every row masks its logits with a grammar state so
//! that only well-formed continuations can be drawn. There is no cache: the
//! temporal stack is rerun over the whole prefix at each step.

use std::path::Path;

use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use xmvae_core::codec::{decode_score, performance_timeline};
use xmvae_core::dataset::Batch;
use xmvae_core::expressive::ExpressiveParams;
use xmvae_core::grammar::validate_grammar;
use xmvae_core::midi::write_performance;
use xmvae_core::notes::{PerformedNote, ScoreNote, PIANO_HIGH};
use xmvae_core::quantize::QuantizationSpec;
use xmvae_core::token::{
    pitch_id, BeatPosition, CompoundToken, EcpSequence, Family, BEAT_POSITION, DURATION, FAMILY,
    IGNORE, PITCH,
};

use crate::config::GenerationConfig;
use crate::decoder::id_columns;
use crate::error::{Error, Result};
use crate::nn::additive_mask;
use crate::prior::{top_k_sample, Prior};
use crate::xmvae::{standard_normal, Inputs, Xmvae};

/// Smallest code body the prior may emit: BOS, one beat, one note, EOS.
const MIN_CODES: usize = 4;

/// Grammar state of one score row.
#[derive(Debug, Clone, Default)]
pub struct ScoreState {
    seen_beat: bool,
    tick: u32,
    /// Highest pitch of the current note group.
    last_pitch: Option<u8>,
}

impl ScoreState {
    /// Admissible ids of `column` given the sub-tokens already chosen at
    /// this step. `step` and `len` place the step in its row.
    pub fn allowed(&self, step: usize, len: usize, column: usize, chosen: &[u32], vocab: usize) -> Vec<bool> {
        let only = |id: u32| (0..vocab).map(|i| i as u32 == id).collect::<Vec<_>>();
        if step == 0 {
            return only(CompoundToken::bos().score[column]);
        }
        if step + 1 == len {
            return only(CompoundToken::eos().score[column]);
        }
        let family = chosen.first().and_then(|&f| Family::from_id(f));
        match column {
            FAMILY => {
                let mut a = only(Family::Metric.id());
                a[Family::Note.id() as usize] = self.seen_beat && self.last_pitch != Some(PIANO_HIGH);
                a
            }
            BEAT_POSITION => match family {
                Some(Family::Metric) => (0..vocab as u32)
                    .map(|id| match BeatPosition::from_id(id) {
                        Some(BeatPosition::Beat) => true,
                        Some(BeatPosition::Pos(k)) => self.seen_beat && k as u32 > self.tick,
                        None => false,
                    })
                    .collect(),
                _ => only(IGNORE),
            },
            PITCH => match family {
                Some(Family::Note) => {
                    let floor = self.last_pitch.map_or(1, |p| pitch_id(p) + 1);
                    (0..vocab as u32).map(|id| id >= floor).collect()
                }
                _ => only(IGNORE),
            },
            DURATION => match family {
                Some(Family::Note) => (0..vocab).map(|id| id != IGNORE as usize).collect(),
                _ => only(IGNORE),
            },
            _ => unreachable!("four score columns"),
        }
    }

    pub fn advance(&mut self, token: &CompoundToken) {
        match token.family() {
            Some(Family::Metric) => {
                match token.beat_position() {
                    Some(BeatPosition::Beat) => {
                        self.seen_beat = true;
                        self.tick = 0;
                    }
                    Some(BeatPosition::Pos(k)) => self.tick = k as u32,
                    None => {}
                }
                self.last_pitch = None;
            }
            Some(Family::Note) => self.last_pitch = token.pitch(),
            _ => {}
        }
    }
}

/// Admissible performance ids at a step: any bin on notes, IGNORE elsewhere.
pub fn perf_allowed(score: &CompoundToken, vocab: usize) -> Vec<bool> {
    let note = score.is(Family::Note);
    (0..vocab).map(|id| (id != IGNORE as usize) == note).collect()
}

/// Per-row constraint consulted by the decoding loop.
trait Constraint {
    /// All four ids when the step is fully determined.
    fn forced(&self, row: usize, step: usize) -> Option<[u32; 4]>;
    fn allowed(&self, row: usize, step: usize, column: usize, chosen: &[u32], vocab: usize) -> Vec<bool>;
    fn commit(&mut self, row: usize, step: usize, ids: [u32; 4]);
}

struct ScoreRows {
    states: Vec<ScoreState>,
    lengths: Vec<usize>,
    prefix: Vec<Vec<CompoundToken>>,
}

impl Constraint for ScoreRows {
    fn forced(&self, row: usize, step: usize) -> Option<[u32; 4]> {
        if let Some(t) = self.prefix[row].get(step) {
            return Some(t.score);
        }
        if step == 0 {
            return Some(CompoundToken::bos().score);
        }
        (step + 1 == self.lengths[row]).then_some(CompoundToken::eos().score)
    }

    fn allowed(&self, row: usize, step: usize, column: usize, chosen: &[u32], vocab: usize) -> Vec<bool> {
        self.states[row].allowed(step, self.lengths[row], column, chosen, vocab)
    }

    fn commit(&mut self, row: usize, _step: usize, ids: [u32; 4]) {
        let token = CompoundToken {
            score: ids,
            perf: [IGNORE; 4],
        };
        self.states[row].advance(&token);
    }
}

struct PerfRows<'a> {
    scores: Vec<&'a [CompoundToken]>,
    /// Steps whose performance ids are given.
    prefix: Vec<Vec<[u32; 4]>>,
}

impl Constraint for PerfRows<'_> {
    fn forced(&self, row: usize, step: usize) -> Option<[u32; 4]> {
        if let Some(p) = self.prefix[row].get(step) {
            return Some(*p);
        }
        (!self.scores[row][step].is(Family::Note)).then_some([IGNORE; 4])
    }

    fn allowed(&self, row: usize, step: usize, _column: usize, _chosen: &[u32], vocab: usize) -> Vec<bool> {
        perf_allowed(&self.scores[row][step], vocab)
    }

    fn commit(&mut self, _row: usize, _step: usize, _ids: [u32; 4]) {}
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Branch {
    Score,
    Performance,
}

/// Draws one id from masked logits. A single admissible id is taken
/// without consuming randomness.
fn pick(logits: &[f64], allowed: &[bool], top_k: usize, rng: &mut ChaCha8Rng) -> Result<u32> {
    let admissible: Vec<usize> = (0..allowed.len()).filter(|&i| allowed[i]).collect();
    match admissible.len() {
        0 => Err(Error::Generation("no admissible sub-token".into())),
        1 => Ok(admissible[0] as u32),
        _ => {
            let masked: Vec<f64> = logits
                .iter()
                .zip(allowed)
                .map(|(&l, &a)| if a { l } else { f64::NEG_INFINITY })
                .collect();
            Ok(top_k_sample(&masked, top_k, rng))
        }
    }
}

/// Autoregressive decoding of one branch for a batch of rows.
/// `memory`: (B, L, d); `zs`: (B, L, d_z), read by the performance branch.
#[allow(clippy::too_many_arguments)]
fn decode(
    model: &Xmvae,
    branch: Branch,
    memory: &Tensor,
    zs: &Tensor,
    lengths: &[usize],
    constraint: &mut dyn Constraint,
    top_k: usize,
    rngs: &mut [ChaCha8Rng],
) -> Result<Vec<Vec<[u32; 4]>>> {
    let b = lengths.len();
    let l = lengths.iter().copied().max().unwrap_or(0);
    let dev = model.device();
    let dtype = model.dtype();
    let (decoder, embed, vocab) = match branch {
        Branch::Score => (&model.composer.decoder, &model.composer.embed, model.config.vocab.score),
        Branch::Performance => (&model.pianist.decoder, &model.pianist.embed, model.config.vocab.perf),
    };
    let memory_mask = |t: usize| additive_mask(b, t, l, dtype, dev, |r, _, j| j < lengths[r]);
    // ids[r][step]; steps not yet decoded hold IGNORE placeholders
    let mut ids = vec![vec![[IGNORE; 4]; l]; b];
    for step in 0..l {
        let active: Vec<usize> = (0..b).filter(|&r| step < lengths[r]).collect();
        let mut open = Vec::new();
        for &r in &active {
            match constraint.forced(r, step) {
                Some(f) => {
                    ids[r][step] = f;
                    constraint.commit(r, step, f);
                }
                None => open.push(r),
            }
        }
        if open.is_empty() {
            continue;
        }
        let t = step + 1;
        let flat: Vec<u32> = ids.iter().flat_map(|row| row[..t].iter().flatten().copied()).collect();
        let x = match branch {
            Branch::Score => model.score_decoder_input(&flat, b, t)?,
            Branch::Performance => model.performance_decoder_input(&flat, &zs.narrow(1, 0, t)?)?,
        };
        let causal = additive_mask(b, t, t, dtype, dev, |_, i, j| j <= i)?;
        let h = decoder.temporal(&x, memory, &causal, Some(&memory_mask(t)?))?;
        let h = h.narrow(1, step, 1)?.squeeze(1)?.contiguous()?;
        let rows = Tensor::from_vec(open.iter().map(|&r| r as u32).collect::<Vec<_>>(), open.len(), dev)?;
        let h = h.index_select(&rows, 0)?;
        let mut chosen = vec![[IGNORE; 4]; open.len()];
        for column in 0..4 {
            let current: Vec<u32> = chosen.iter().flatten().copied().collect();
            let columns = id_columns(&current, open.len(), dev)?;
            let logits = decoder.subtokens(&h, &columns, embed)?[column]
                .to_dtype(DType::F64)?
                .to_vec2::<f64>()?;
            for (k, &r) in open.iter().enumerate() {
                let allowed = constraint.allowed(r, step, column, &chosen[k][..column], vocab[column]);
                chosen[k][column] = pick(&logits[k], &allowed, top_k, &mut rngs[r])?;
            }
        }
        for (k, &r) in open.iter().enumerate() {
            ids[r][step] = chosen[k];
            constraint.commit(r, step, chosen[k]);
        }
    }
    Ok(ids
        .into_iter()
        .zip(lengths)
        .map(|(mut row, &len)| {
            row.truncate(len);
            row
        })
        .collect())
}

/// Latent codes as a padded (B, L, d_z) tensor.
fn latents(model: &Xmvae, codes: &[Vec<u32>]) -> Result<Tensor> {
    let l = codes.iter().map(Vec::len).max().unwrap_or(0);
    let mut flat = Vec::with_capacity(codes.len() * l);
    for c in codes {
        flat.extend_from_slice(c);
        flat.extend(std::iter::repeat_n(0, l - c.len()));
    }
    model.codes_to_latent(&flat, codes.len(), l)
}

/// Joins score and performance ids and fills `pv` from the dequantized bins.
fn assemble(score: &[CompoundToken], perf: &[[u32; 4]], spec: &QuantizationSpec) -> Result<EcpSequence> {
    let tokens: Vec<CompoundToken> = score
        .iter()
        .zip(perf)
        .map(|(s, p)| CompoundToken { score: s.score, perf: *p })
        .collect();
    let pv = tokens
        .iter()
        .map(|t| match t.perf_bins() {
            Some(bins) if t.is(Family::Note) => Ok(spec.dequantize(&bins)?.as_row()),
            _ => Ok([0.0; 4]),
        })
        .collect::<Result<_>>()?;
    Ok(EcpSequence { tokens, pv })
}

/// Samples performance ids for fixed score rows.
#[allow(clippy::too_many_arguments)]
fn perform(
    model: &Xmvae,
    scores: &[&[CompoundToken]],
    zs: &Tensor,
    zp: &Tensor,
    prefix: Vec<Vec<[u32; 4]>>,
    top_k: usize,
    rngs: &mut [ChaCha8Rng],
) -> Result<Vec<Vec<[u32; 4]>>> {
    let lengths: Vec<usize> = scores.iter().map(|s| s.len()).collect();
    let memory = model.performance_memory(zs, zp)?;
    let mut rows = PerfRows {
        scores: scores.to_vec(),
        prefix,
    };
    decode(model, Branch::Performance, &memory, zs, &lengths, &mut rows, top_k, rngs)
}

/// One generated piece and how it was obtained.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratedPiece {
    pub index: usize,
    pub codes: Vec<u32>,
    pub sequence: EcpSequence,
    pub attempts: usize,
    /// Empty when the sequence is well formed and decodes.
    pub problems: Vec<String>,
}

impl GeneratedPiece {
    pub fn is_valid(&self) -> bool {
        self.problems.is_empty()
    }
}

fn check(seq: &EcpSequence, spec: &QuantizationSpec) -> Vec<String> {
    let mut problems: Vec<String> = validate_grammar(seq).iter().map(|d| d.to_string()).collect();
    if problems.is_empty() {
        if seq.note_count() == 0 {
            problems.push("no notes".into());
        } else if let Err(e) = performance_timeline(seq, spec) {
            problems.push(e.to_string());
        }
    }
    problems
}

/// Row generators: piece `i` draws from stream `i` of the seed, so a piece
/// does not depend on how many others are generated with it.
fn piece_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Score and performance steps that open a primed piece.
#[derive(Debug, Clone, Default)]
pub struct Prime {
    pub tokens: Vec<CompoundToken>,
    pub codes: Vec<u32>,
}

impl Prime {
    /// Encodes a prime sequence. A trailing EOS is dropped so the piece can
    /// continue.
    pub fn from_sequence(model: &Xmvae, seq: &EcpSequence) -> Result<Self> {
        let mut tokens = seq.tokens.clone();
        if tokens.last().is_some_and(|t| t.is(Family::Eos)) {
            tokens.pop();
        }
        if tokens.first().is_none_or(|t| !t.is(Family::Bos)) {
            return Err(Error::Generation("a prime must start with BOS".into()));
        }
        if tokens.iter().any(|t| t.is(Family::Note) && t.perf_bins().is_none()) {
            return Err(Error::Generation("prime notes need performance ids".into()));
        }
        let trimmed = EcpSequence {
            pv: seq.pv[..tokens.len()].to_vec(),
            tokens: tokens.clone(),
        };
        let codes = encode_codes(model, &[&trimmed])?.remove(0);
        Ok(Self { tokens, codes })
    }
}

/// Composer code indices of whole sequences (no longer than `max_len`).
pub fn encode_codes(model: &Xmvae, seqs: &[&EcpSequence]) -> Result<Vec<Vec<u32>>> {
    if seqs.iter().any(|s| s.len() > model.config.max_len) {
        return Err(Error::Shape(format!("sequence longer than {} steps", model.config.max_len)));
    }
    let batch = Batch::from_sequences(seqs, (0..seqs.len()).collect());
    let inp = Inputs::from_batch(&batch, model.config.max_len, model.dtype(), model.device())?;
    let (codes, _) = model.quantize(&model.encode_score(&inp)?)?;
    Ok((0..inp.b)
        .map(|r| codes[r * inp.t..r * inp.t + inp.lengths[r]].to_vec())
        .collect())
}

/// Samples `n` pieces from scratch.
pub fn generate_from_scratch(
    model: &Xmvae,
    prior: &Prior,
    cfg: &GenerationConfig,
    n: usize,
    seed: u64,
    spec: &QuantizationSpec,
) -> Result<Vec<GeneratedPiece>> {
    generate(model, prior, cfg, n, seed, spec, &Prime::default())
}

/// Samples `n` continuations of a prime. An empty prime is generation
/// from scratch.
pub fn generate_primed(
    model: &Xmvae,
    prior: &Prior,
    cfg: &GenerationConfig,
    n: usize,
    seed: u64,
    spec: &QuantizationSpec,
    prime: &Prime,
) -> Result<Vec<GeneratedPiece>> {
    generate(model, prior, cfg, n, seed, spec, prime)
}

fn generate(
    model: &Xmvae,
    prior: &Prior,
    cfg: &GenerationConfig,
    n: usize,
    seed: u64,
    spec: &QuantizationSpec,
    prime: &Prime,
) -> Result<Vec<GeneratedPiece>> {
    if prior.shape.codes != model.codebook.k {
        return Err(Error::Config(format!(
            "prior over {} codes for a codebook of {}",
            prior.shape.codes, model.codebook.k
        )));
    }
    let cap = cfg.length.min(model.config.max_len);
    if cap < MIN_CODES.max(prime.tokens.len() + 1) {
        return Err(Error::Config(format!("generation length {cap} is too short")));
    }
    let mut rngs: Vec<ChaCha8Rng> = (0..n).map(|i| piece_rng(seed, i)).collect();
    let mut done: Vec<Option<GeneratedPiece>> = vec![None; n];
    for attempt in 1..=cfg.retries.max(1) {
        let pending: Vec<usize> = (0..n)
            .filter(|&i| done[i].as_ref().is_none_or(|p| !p.is_valid()))
            .collect();
        if pending.is_empty() {
            break;
        }
        for chunk in pending.chunks(16) {
            let pieces = attempt_pieces(model, prior, cfg, cap, spec, prime, chunk, &mut rngs)?;
            for (&i, (codes, sequence)) in chunk.iter().zip(pieces) {
                let problems = check(&sequence, spec);
                if !problems.is_empty() {
                    log::debug!("piece {i} attempt {attempt}: {}", problems.join(", "));
                }
                done[i] = Some(GeneratedPiece {
                    index: i,
                    codes,
                    sequence,
                    attempts: attempt,
                    problems,
                });
            }
        }
    }
    Ok(done.into_iter().map(|p| p.expect("every piece attempted")).collect())
}

#[allow(clippy::too_many_arguments)]
fn attempt_pieces(
    model: &Xmvae,
    prior: &Prior,
    cfg: &GenerationConfig,
    cap: usize,
    spec: &QuantizationSpec,
    prime: &Prime,
    rows: &[usize],
    rngs: &mut [ChaCha8Rng],
) -> Result<Vec<(Vec<u32>, EcpSequence)>> {
    let mut local: Vec<ChaCha8Rng> = rows.iter().map(|&i| rngs[i].clone()).collect();
    let min_len = MIN_CODES.max(prime.codes.len() + 1);
    let codes = local
        .iter_mut()
        .map(|rng| prior.sample(cap, min_len, cfg.top_k, &prime.codes, rng))
        .collect::<Result<Vec<_>>>()?;
    let lengths: Vec<usize> = codes.iter().map(Vec::len).collect();
    let zs = latents(model, &codes)?;

    let mut score_rows = ScoreRows {
        states: vec![ScoreState::default(); rows.len()],
        lengths: lengths.clone(),
        prefix: vec![prime.tokens.clone(); rows.len()],
    };
    let memory = model.score_memory(&zs)?;
    let score = decode(model, Branch::Score, &memory, &zs, &lengths, &mut score_rows, cfg.top_k, &mut local)?;
    let score: Vec<Vec<CompoundToken>> = score
        .into_iter()
        .map(|row| row.into_iter().map(|s| CompoundToken { score: s, perf: [IGNORE; 4] }).collect())
        .collect();

    let zp = local
        .iter_mut()
        .map(|rng| standard_normal((1, model.config.d_z), rng, model.dtype(), model.device()))
        .collect::<Result<Vec<_>>>()?;
    let zp = Tensor::cat(&zp, 0)?;
    let prefix = vec![prime.tokens.iter().map(|t| t.perf).collect::<Vec<_>>(); rows.len()];
    let refs: Vec<&[CompoundToken]> = score.iter().map(Vec::as_slice).collect();
    let perf = perform(model, &refs, &zs, &zp, prefix, cfg.top_k, &mut local)?;

    for (k, &i) in rows.iter().enumerate() {
        rngs[i] = local[k].clone();
    }
    score
        .iter()
        .zip(&perf)
        .zip(codes)
        .map(|((s, p), c)| Ok((c, assemble(s, p, spec)?)))
        .collect()
}

#[derive(Debug, Clone)]
pub struct RenderOptions {
    pub top_k: usize,
    /// Use the prior mean z_p = 0 instead of a sample.
    pub zero_latent: bool,
    pub seed: u64,
    /// Steps shared by consecutive windows of a long score.
    pub overlap: usize,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            top_k: 8,
            zero_latent: false,
            seed: 0,
            overlap: 64,
        }
    }
}

/// A score note with the performance chosen for it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RenderedNote {
    pub score: ScoreNote,
    pub performed: PerformedNote,
    pub params: ExpressiveParams,
}

#[derive(Debug, Clone)]
pub struct Rendering {
    pub sequence: EcpSequence,
    pub notes: Vec<RenderedNote>,
    pub beat_times: Vec<f64>,
}

/// Step ranges covering `len` steps in windows of at most `window` steps,
/// consecutive windows sharing `overlap` steps.
pub fn windows(len: usize, window: usize, overlap: usize) -> Vec<std::ops::Range<usize>> {
    let overlap = overlap.min(window / 2);
    let mut out = vec![0..len.min(window)];
    while out.last().expect("non-empty").end < len {
        let start = out.last().expect("non-empty").end - overlap;
        out.push(start..(start + window).min(len));
    }
    out
}

/// Performs a score. Score ids are kept as given; only performance ids are
/// sampled. Scores longer than the model's context are rendered window by
/// window, each window continuing from the end of the previous one.
pub fn render_performance(
    model: &Xmvae,
    score: &EcpSequence,
    opts: &RenderOptions,
    spec: &QuantizationSpec,
) -> Result<Rendering> {
    let score = score.score_only();
    if let Some(d) = xmvae_core::grammar::validate_score_grammar(&score).first() {
        return Err(Error::Generation(format!("score is malformed: {d}")));
    }
    let mut rng = piece_rng(opts.seed, 0);
    let zp = if opts.zero_latent {
        Tensor::zeros((1, model.config.d_z), model.dtype(), model.device())?
    } else {
        standard_normal((1, model.config.d_z), &mut rng, model.dtype(), model.device())?
    };
    let mut perf = vec![[IGNORE; 4]; score.len()];
    let mut rngs = [rng];
    for range in windows(score.len(), model.config.max_len, opts.overlap) {
        let part = EcpSequence {
            tokens: score.tokens[range.clone()].to_vec(),
            pv: score.pv[range.clone()].to_vec(),
        };
        let codes = encode_codes(model, &[&part])?;
        let zs = latents(model, &codes)?;
        // steps already rendered by the previous window are kept
        let given: Vec<[u32; 4]> = perf[range.start..range.end]
            .iter()
            .zip(&part.tokens)
            .take_while(|(p, t)| !t.is(Family::Note) || p[0] != IGNORE)
            .map(|(p, _)| *p)
            .collect();
        let given = if range.start == 0 { Vec::new() } else { given };
        let out = perform(model, &[&part.tokens], &zs, &zp, vec![given], opts.top_k, &mut rngs)?;
        perf[range].copy_from_slice(&out[0]);
    }
    let sequence = assemble(&score.tokens, &perf, spec)?;
    let timeline = performance_timeline(&sequence, spec)?;
    let written = decode_score(&sequence, spec)?;
    let notes = written
        .into_iter()
        .zip(timeline.notes)
        .zip(timeline.params)
        .map(|((score, performed), params)| RenderedNote { score, performed, params })
        .collect();
    Ok(Rendering {
        sequence,
        notes,
        beat_times: timeline.beat_times,
    })
}

/// Decodes the performance of a sequence and writes it as MIDI.
pub fn tokens_to_midi(seq: &EcpSequence, spec: &QuantizationSpec, path: &Path) -> Result<Vec<PerformedNote>> {
    let notes = xmvae_core::codec::decode_performance(seq, spec)?;
    write_performance(&notes, path)?;
    Ok(notes)
}

/// Record of a generation run, written next to the MIDI files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub model: String,
    pub prior: String,
    pub seed: u64,
    pub top_k: usize,
    pub length: usize,
    pub pieces: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub index: usize,
    pub file: Option<String>,
    pub steps: usize,
    pub notes: usize,
    pub attempts: usize,
    pub valid: bool,
    pub problems: Vec<String>,
}

impl ManifestEntry {
    pub fn new(piece: &GeneratedPiece, file: Option<String>) -> Self {
        Self {
            index: piece.index,
            file,
            steps: piece.sequence.len(),
            notes: piece.sequence.note_count(),
            attempts: piece.attempts,
            valid: piece.is_valid(),
            problems: piece.problems.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ModelConfig, PriorConfig};
    use crate::prior::PriorShape;
    use candle_core::Device;
    use xmvae_core::codec::encode_score;
    use xmvae_core::synthetic::synthetic_piece;

    fn setup() -> (Xmvae, Prior) {
        let model = Xmvae::new(ModelConfig::tiny(), 7, DType::F32, &Device::Cpu).unwrap();
        let shape = PriorShape {
            config: PriorConfig::tiny(),
            codes: model.codebook.k,
            max_len: model.config.max_len,
        };
        let prior = Prior::new(shape, 8, DType::F32, &Device::Cpu).unwrap();
        (model, prior)
    }

    fn small() -> GenerationConfig {
        GenerationConfig {
            length: 24,
            top_k: 8,
            retries: 2,
        }
    }

    #[test]
    fn untrained_generation_is_well_formed_and_seeded() {
        let (model, prior) = setup();
        let spec = QuantizationSpec::default();
        let a = generate_from_scratch(&model, &prior, &small(), 3, 11, &spec).unwrap();
        for p in &a {
            assert!(p.is_valid(), "{:?}", p.problems);
            assert_eq!(p.codes.len(), p.sequence.len());
        }
        let b = generate_from_scratch(&model, &prior, &small(), 3, 11, &spec).unwrap();
        assert_eq!(
            a.iter().map(|p| &p.sequence).collect::<Vec<_>>(),
            b.iter().map(|p| &p.sequence).collect::<Vec<_>>()
        );
        // a piece does not depend on its batch
        let one = generate_from_scratch(&model, &prior, &small(), 1, 11, &spec).unwrap();
        assert_eq!(one[0].sequence.tokens, a[0].sequence.tokens);
    }

    #[test]
    fn primed_pieces_keep_the_prime() {
        let (model, prior) = setup();
        let spec = QuantizationSpec::default();
        let notes = synthetic_piece(2, 3);
        let seq = xmvae_core::codec::encode_aligned(&notes, &spec).unwrap();
        let prime = Prime::from_sequence(&model, &seq).unwrap();
        let cfg = GenerationConfig { length: 30, ..small() };
        let out = generate_primed(&model, &prior, &cfg, 2, 0, &spec, &prime).unwrap();
        for p in out {
            assert!(p.is_valid(), "{:?}", p.problems);
            assert_eq!(&p.sequence.tokens[..prime.tokens.len()], &prime.tokens[..]);
            assert_eq!(&p.codes[..prime.codes.len()], &prime.codes[..]);
        }
    }

    #[test]
    fn rendering_keeps_every_note_across_windows() {
        let config = ModelConfig {
            max_len: 64,
            ..ModelConfig::tiny()
        };
        let model = Xmvae::new(config, 7, DType::F32, &Device::Cpu).unwrap();
        let spec = QuantizationSpec::default();
        let score: Vec<ScoreNote> = synthetic_piece(4, 60).into_iter().map(|n| n.score).collect();
        let seq = encode_score(&score, &spec);
        assert!(seq.len() > model.config.max_len);
        let opts = RenderOptions {
            overlap: 16,
            ..RenderOptions::default()
        };
        let r = render_performance(&model, &seq, &opts, &spec).unwrap();
        let key = |n: &ScoreNote| (n.pitch, (n.onset * 24.0).round() as i64, (n.duration * 24.0).round() as i64);
        let mut want: Vec<_> = decode_score(&seq, &spec).unwrap().iter().map(key).collect();
        let mut got: Vec<_> = r.notes.iter().map(|n| key(&n.score)).collect();
        want.sort();
        got.sort();
        assert_eq!(want, got);
        for n in &r.notes {
            assert!(n.params.beat_period > 0.0 && n.params.articulation > 0.0);
            assert!(n.performed.duration > 0.0 && n.performed.onset.is_finite());
        }
        let again = render_performance(&model, &seq, &opts, &spec).unwrap();
        assert_eq!(r.sequence, again.sequence);
    }

    #[test]
    fn window_ranges_cover_and_overlap() {
        assert_eq!(windows(10, 16, 4), vec![0..10]);
        assert_eq!(windows(40, 16, 4), vec![0..16, 12..28, 24..40]);
    }

    #[test]
    fn score_state_rejects_backward_positions_and_pitches() {
        let mut s = ScoreState::default();
        s.advance(&CompoundToken::metric(BeatPosition::Beat));
        s.advance(&CompoundToken::metric(BeatPosition::Pos(6)));
        let pos = s.allowed(3, 10, BEAT_POSITION, &[Family::Metric.id()], 25);
        assert!(pos[BeatPosition::Beat.id() as usize]);
        assert!(!pos[BeatPosition::Pos(6).id() as usize]);
        assert!(pos[BeatPosition::Pos(7).id() as usize]);
        s.advance(&CompoundToken::note(60, 3, None));
        let pitch = s.allowed(4, 10, PITCH, &[Family::Note.id()], 89);
        assert!(!pitch[pitch_id(60) as usize] && pitch[pitch_id(61) as usize]);
        let fresh = ScoreState::default().allowed(1, 10, FAMILY, &[], 5);
        assert!(!fresh[Family::Note.id() as usize]);
    }
}
