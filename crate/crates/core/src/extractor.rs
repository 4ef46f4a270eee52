//! Streaming Toeplitz extraction.
//!
//! Each calculation block turns `k` raw bits into `j` output bits by walking
//! the input `G` bits per step and XOR-ing the matrix columns selected by set
//! input bits into a `j`-bit accumulator. No multiplication ever happens: the
//! product `T · D` is the XOR of the columns of `T` where `D` is one.
//!
//! Several blocks run side by side. Raw bits are dealt to them in contiguous
//! `k`-bit chunks, block 0 first, and the outputs are reassembled in chunk
//! order so the result does not depend on how many threads did the work.

use std::io::Write;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::bits::{low_mask, BitBlock, BitSource, BitWriter, SliceBits};
use crate::error::{Error, Result};
use crate::toeplitz::ToeplitzSeed;

/// Geometry of one extraction run, shared by the scheduler and every block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ExtractorConfig {
    /// Output bits per block.
    pub j: usize,
    /// Input bits per block.
    pub k: usize,
    /// Input bits consumed per step (`G`).
    pub group: usize,
    /// Number of calculation blocks chunks are dealt to.
    pub block_count: usize,
    /// Nominal rates, present when the block count was derived from them.
    pub rates: Option<RatePlan>,
}

/// Sample-side and calculation-side rates behind a derived block count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RatePlan {
    /// Samples per second (`S`).
    pub sample_rate: u64,
    /// Bits per sample (`n`).
    pub precision: u32,
    /// Steps per second of one block (`C`).
    pub calc_rate: u64,
    /// `log2(S / C)`.
    pub rate_ratio_log2: i32,
    /// Cascaded FIFOs needed to bridge `S / C`; one stage covers a factor of 8.
    pub fifo_stages: u32,
}

impl ExtractorConfig {
    pub fn new(j: usize, k: usize, group: usize, block_count: usize) -> Result<Self> {
        if j == 0 || group == 0 || block_count == 0 {
            return Err(Error::Config(format!(
                "j, G and block count must be positive (j = {j}, G = {group}, blocks = {block_count})"
            )));
        }
        if j >= k {
            return Err(Error::Config(format!(
                "extraction must compress: j = {j} is not less than k = {k}"
            )));
        }
        if !k.is_multiple_of(group) {
            return Err(Error::Config(format!("k = {k} is not a multiple of G = {group}")));
        }
        Ok(ExtractorConfig {
            j,
            k,
            group,
            block_count,
            rates: None,
        })
    }

    /// Derives the block count `(S·n)/(C·G)` from nominal rates. `G` must be a
    /// positive multiple of `n`, and `S/C` a power of two.
    pub fn from_rates(
        j: usize,
        k: usize,
        group: usize,
        sample_rate: u64,
        precision: u32,
        calc_rate: u64,
    ) -> Result<Self> {
        if precision == 0 || !group.is_multiple_of(precision as usize) {
            return Err(Error::Config(format!(
                "G = {group} must be a positive multiple of n = {precision}"
            )));
        }
        let blocks = compute_block_count(sample_rate, precision, calc_rate, group as u32)?;
        let fifo = fifo_stages(sample_rate, calc_rate)?;
        let mut config = Self::new(j, k, group, blocks)?;
        config.rates = Some(RatePlan {
            sample_rate,
            precision,
            calc_rate,
            rate_ratio_log2: fifo.0,
            fifo_stages: fifo.1,
        });
        Ok(config)
    }

    /// Steps per block, `k / G`.
    pub fn steps(&self) -> usize {
        self.k / self.group
    }

    fn check_seed(&self, seed: &ToeplitzSeed) -> Result<()> {
        if seed.j() != self.j || seed.k() != self.k {
            return Err(Error::Config(format!(
                "seed is {}x{} but the extractor expects {}x{}",
                seed.j(),
                seed.k(),
                self.j,
                self.k
            )));
        }
        Ok(())
    }
}

/// Number of calculation blocks needed to keep up with the sampler,
/// `(S·n)/(C·G)`.
pub fn compute_block_count(sample_rate: u64, precision: u32, calc_rate: u64, group: u32) -> Result<usize> {
    if sample_rate == 0 || precision == 0 || calc_rate == 0 || group == 0 {
        return Err(Error::Config("rates, n and G must all be positive".into()));
    }
    let input = sample_rate as u128 * precision as u128;
    let per_block = calc_rate as u128 * group as u128;
    if input.is_multiple_of(per_block) {
        return Ok((input / per_block) as usize);
    }
    let nearest = ((input as f64 / per_block as f64).round() as u128).max(1);
    let suggestion = if input.is_multiple_of(nearest * group as u128) {
        format!("C = {} Hz gives {nearest} blocks", input / (nearest * group as u128))
    } else {
        format!("no integral C yields {nearest} blocks for this S, n, G")
    };
    Err(Error::Config(format!(
        "S·n = {input} bit/s is not a multiple of C·G = {per_block} bit/s; {suggestion}"
    )))
}

/// Checks that `S / C = 2^i` and returns `(i, cascaded FIFO stages)`.
pub fn fifo_stages(sample_rate: u64, calc_rate: u64) -> Result<(i32, u32)> {
    let (hi, lo) = if sample_rate >= calc_rate {
        (sample_rate, calc_rate)
    } else {
        (calc_rate, sample_rate)
    };
    if lo == 0 || hi % lo != 0 || !(hi / lo).is_power_of_two() {
        return Err(Error::Config(format!(
            "S/C = {sample_rate}/{calc_rate} is not a power of two"
        )));
    }
    let exp = (hi / lo).trailing_zeros() as i32;
    let i = if sample_rate >= calc_rate { exp } else { -exp };
    Ok((i, (i.unsigned_abs()).div_ceil(3).max(1)))
}

/// The seed laid out as column windows.
///
/// Column `c` of the matrix, read top row first, is the reversed seed starting
/// at bit `k - 1 - c`. The reversed seed is stored once per bit offset modulo
/// 8, so any column is a byte-aligned run that can be read as whole 64-bit
/// words. Eight copies of a 6144x12288 seed take about 18 KiB.
#[derive(Clone)]
pub struct SeedWindows {
    k: usize,
    out_words: usize,
    stride: usize,
    shifted: Vec<u8>,
}

impl SeedWindows {
    pub fn new(seed: &ToeplitzSeed) -> Self {
        let (j, k) = (seed.j(), seed.k());
        let len = j + k - 1;
        let reversed: BitBlock = (0..len).map(|m| seed.bits().get(len - 1 - m)).collect();
        let stride = len.div_ceil(8) + 16;
        let mut shifted = vec![0u8; 8 * stride];
        for s in 0..8 {
            for b in 0..stride {
                shifted[s * stride + b] = reversed.read_word_at(8 * b + s) as u8;
            }
        }
        SeedWindows {
            k,
            out_words: j.div_ceil(64),
            stride,
            shifted,
        }
    }

    /// Column `c` as `ceil(j/64)` little-endian words; bits above `j` in the
    /// last word are seed residue and must be masked by the caller.
    #[inline]
    pub fn column(&self, c: usize) -> &[u8] {
        let base = self.column_offset(c);
        &self.shifted[base..base + 8 * self.out_words]
    }

    #[inline(always)]
    fn column_offset(&self, c: usize) -> usize {
        let start = self.k - 1 - c;
        (start % 8) * self.stride + start / 8
    }

    /// XORs the columns at `offsets` into `acc`. The accumulator is walked in
    /// strips that stay in registers while every column is folded in: wide
    /// strips first, then narrow ones, then single words.
    #[inline(always)]
    fn fold_columns(&self, acc: &mut [u64], offsets: &[usize]) {
        let wide = fold_strips::<32>(&self.shifted, acc, offsets, 0);
        let narrow = fold_strips::<8>(&self.shifted, &mut acc[wide..], offsets, 8 * wide);
        fold_strips::<1>(&self.shifted, &mut acc[wide + narrow..], offsets, 8 * (wide + narrow));
    }
}

/// Folds whole `N`-word strips of `acc`, reading columns from byte `at`
/// onwards; returns the number of words covered.
#[inline(always)]
fn fold_strips<const N: usize>(bytes: &[u8], acc: &mut [u64], offsets: &[usize], mut at: usize) -> usize {
    let mut strips = acc.chunks_exact_mut(N);
    let mut done = 0;
    for strip in &mut strips {
        let mut r: [u64; N] = strip.try_into().unwrap();
        for &o in offsets {
            let src = &bytes[o + at..o + at + 8 * N];
            for (z, b) in r.iter_mut().zip(src.chunks_exact(8)) {
                *z ^= u64::from_le_bytes(b.try_into().unwrap());
            }
        }
        strip.copy_from_slice(&r);
        at += 8 * N;
        done += N;
    }
    done
}

/// Per-block register state.
#[derive(Debug, Clone)]
pub struct BlockState {
    /// Accumulator `Z_i`.
    acc: Vec<u64>,
    /// Step counter `i`.
    step: usize,
    /// Columns consumed so far, `i · G`.
    cursor: usize,
}

impl BlockState {
    pub fn new(j: usize) -> Self {
        BlockState {
            acc: vec![0; j.div_ceil(64)],
            step: 0,
            cursor: 0,
        }
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    fn reset(&mut self) {
        self.acc.fill(0);
        self.step = 0;
        self.cursor = 0;
    }

    /// One step: `Z_{i+1} = Z_i ⊕ U_i`, where `U_i` is the XOR of the columns
    /// among the next `G` whose input bit is one. `U_i` is folded straight into
    /// the accumulator. When all `G` bits are zero the accumulator is untouched.
    #[inline(always)]
    fn advance(&mut self, windows: &SeedWindows, data: &BitBlock, group: usize) {
        let mut offsets = [0usize; 64];
        let mut offset = 0;
        while offset < group {
            let width = (group - offset).min(64);
            let base = self.cursor + offset;
            let mut d = data.read_word_at(base) & low_mask(width);
            let mut m = 0;
            while d != 0 {
                offsets[m] = windows.column_offset(base + d.trailing_zeros() as usize);
                m += 1;
                d &= d - 1;
            }
            if m > 0 {
                windows.fold_columns(&mut self.acc, &offsets[..m]);
            }
            offset += width;
        }
        self.step += 1;
        self.cursor += group;
    }

    /// Emits the `j`-bit result and resets for the next chunk.
    fn emit(&mut self, j: usize) -> BitBlock {
        let out = BitBlock::from_words(self.acc.clone(), j);
        self.reset();
        out
    }
}

/// A seed prepared for repeated block extraction under one configuration.
#[derive(Clone)]
pub struct BlockExtractor {
    config: ExtractorConfig,
    windows: SeedWindows,
}

impl BlockExtractor {
    pub fn new(seed: &ToeplitzSeed, config: &ExtractorConfig) -> Result<Self> {
        config.check_seed(seed)?;
        Ok(BlockExtractor {
            config: config.clone(),
            windows: SeedWindows::new(seed),
        })
    }

    pub fn config(&self) -> &ExtractorConfig {
        &self.config
    }

    pub fn new_state(&self) -> BlockState {
        BlockState::new(self.config.j)
    }

    /// Runs all `k/G` steps of one block over `data`.
    pub fn extract_with(&self, state: &mut BlockState, data: &BitBlock) -> Result<BitBlock> {
        let cfg = &self.config;
        if data.len() != cfg.k {
            return Err(Error::contract(format!(
                "block input has {} bits, expected k = {}",
                data.len(),
                cfg.k
            )));
        }
        state.reset();
        #[cfg(target_arch = "x86_64")]
        {
            if std::arch::is_x86_feature_detected!("avx2") {
                // SAFETY: AVX2 support was just checked.
                unsafe { self.run_steps_avx2(state, data) };
            } else {
                self.run_steps(state, data);
            }
        }
        #[cfg(not(target_arch = "x86_64"))]
        self.run_steps(state, data);
        debug_assert_eq!(state.cursor, cfg.k);
        Ok(state.emit(cfg.j))
    }

    #[inline(always)]
    fn run_steps(&self, state: &mut BlockState, data: &BitBlock) {
        for _ in 0..self.config.steps() {
            state.advance(&self.windows, data, self.config.group);
        }
    }

    /// Same steps, compiled for 256-bit vectors.
    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2")]
    fn run_steps_avx2(&self, state: &mut BlockState, data: &BitBlock) {
        self.run_steps(state, data);
    }

    pub fn extract_block(&self, data: &BitBlock) -> Result<BitBlock> {
        self.extract_with(&mut self.new_state(), data)
    }
}

/// One-shot block extraction; prepares the seed windows on every call, so
/// prefer [`BlockExtractor`] for repeated use.
pub fn extract_block(seed: &ToeplitzSeed, config: &ExtractorConfig, data: &BitBlock) -> Result<BitBlock> {
    BlockExtractor::new(seed, config)?.extract_block(data)
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct BlockUsage {
    pub chunks: u64,
    #[serde(serialize_with = "secs")]
    pub busy: Duration,
}

fn secs<S: serde::Serializer>(d: &Duration, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_f64(d.as_secs_f64())
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct StreamStats {
    pub input_bits: u64,
    pub output_bits: u64,
    pub chunks: u64,
    /// Bits of the trailing partial chunk that were dropped.
    pub discarded_bits: u64,
    #[serde(serialize_with = "secs")]
    pub elapsed: Duration,
    pub blocks: Vec<BlockUsage>,
}

/// Deals a raw bit stream over `block_count` blocks and reassembles the output
/// in chunk order.
pub struct StreamExtractor {
    extractor: BlockExtractor,
    workers: usize,
    rounds_per_batch: usize,
}

impl StreamExtractor {
    pub fn new(seed: &ToeplitzSeed, config: &ExtractorConfig, workers: usize) -> Result<Self> {
        if workers == 0 {
            return Err(Error::Config("worker count must be at least 1".into()));
        }
        Ok(StreamExtractor {
            extractor: BlockExtractor::new(seed, config)?,
            workers,
            rounds_per_batch: (256 / config.block_count).max(4),
        })
    }

    pub fn config(&self) -> &ExtractorConfig {
        self.extractor.config()
    }

    /// Chunks read per scheduling batch, always a multiple of the block count.
    pub fn with_rounds_per_batch(mut self, rounds: usize) -> Self {
        self.rounds_per_batch = rounds.max(1);
        self
    }

    pub fn extract_stream<S: BitSource, W: Write>(&self, raw: &mut S, out: W) -> Result<(W, StreamStats)> {
        let cfg = self.extractor.config();
        let start = Instant::now();
        let mut writer = BitWriter::new(out);
        let mut states: Vec<Mutex<(BlockState, BlockUsage)>> = (0..cfg.block_count)
            .map(|_| Mutex::new((self.extractor.new_state(), BlockUsage::default())))
            .collect();
        let pool = if self.workers > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(self.workers)
                    .build()
                    .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?,
            )
        } else {
            None
        };

        let batch = cfg.block_count * self.rounds_per_batch;
        let mut stats = StreamStats::default();
        loop {
            let mut chunks = Vec::with_capacity(batch);
            let mut tail = 0;
            while chunks.len() < batch {
                let mut chunk = BitBlock::with_capacity(cfg.k);
                let got = raw.read_up_to(&mut chunk, cfg.k)?;
                stats.input_bits += got as u64;
                if got < cfg.k {
                    tail = got;
                    break;
                }
                chunks.push(chunk);
            }
            let first = stats.chunks as usize;
            let outputs = match &pool {
                Some(pool) => pool.install(|| self.run_batch(&states, &chunks, first, true))?,
                None => self.run_batch(&states, &chunks, first, false)?,
            };
            for block in &outputs {
                writer.write_block(block)?;
            }
            stats.chunks += chunks.len() as u64;
            stats.output_bits += (outputs.len() * cfg.j) as u64;
            if tail > 0 || chunks.len() < batch {
                stats.discarded_bits = tail as u64;
                break;
            }
        }
        let out = writer.finish()?;
        stats.elapsed = start.elapsed();
        stats.blocks = states
            .iter_mut()
            .map(|m| m.get_mut().unwrap().1.clone())
            .collect();
        Ok((out, stats))
    }

    /// Processes one batch; chunk `first + i` belongs to block
    /// `(first + i) % block_count`. Output slot `i` holds chunk `i`'s result.
    fn run_batch(
        &self,
        states: &[Mutex<(BlockState, BlockUsage)>],
        chunks: &[BitBlock],
        first: usize,
        parallel: bool,
    ) -> Result<Vec<BitBlock>> {
        let blocks = states.len();
        let work = |b: usize| -> Result<Vec<(usize, BitBlock)>> {
            let mut guard = states[b].lock().unwrap();
            let (state, usage) = &mut *guard;
            let t0 = Instant::now();
            let lead = (b + blocks - first % blocks) % blocks;
            let mut done = Vec::new();
            for i in (lead..chunks.len()).step_by(blocks) {
                done.push((i, self.extractor.extract_with(state, &chunks[i])?));
                usage.chunks += 1;
            }
            usage.busy += t0.elapsed();
            Ok(done)
        };
        let per_block: Vec<Vec<(usize, BitBlock)>> = if parallel {
            (0..blocks).into_par_iter().map(work).collect::<Result<_>>()?
        } else {
            (0..blocks).map(work).collect::<Result<_>>()?
        };
        let mut slots: Vec<Option<BitBlock>> = vec![None; chunks.len()];
        for (i, block) in per_block.into_iter().flatten() {
            slots[i] = Some(block);
        }
        Ok(slots.into_iter().map(|s| s.expect("every chunk assigned")).collect())
    }
}

/// Convenience wrapper: extracts an in-memory bit sequence and returns the
/// output bits.
pub fn extract_stream(
    seed: &ToeplitzSeed,
    config: &ExtractorConfig,
    raw: &BitBlock,
    workers: usize,
) -> Result<(BitBlock, StreamStats)> {
    let ex = StreamExtractor::new(seed, config, workers)?;
    let (bytes, stats) = ex.extract_stream(&mut SliceBits::new(raw), Vec::new())?;
    let bits = BitBlock::from_bytes_lsb(&bytes, stats.output_bits as usize)?;
    Ok((bits, stats))
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub j: usize,
    pub k: usize,
    pub group: usize,
    pub block_count: usize,
    pub workers: usize,
    pub input_bits: u64,
    pub output_bits: u64,
    pub seconds: f64,
    /// `None` when nothing was processed.
    pub input_bps: Option<f64>,
    pub output_bps: Option<f64>,
    /// Busy time over wall time, per block.
    pub block_utilization: Vec<f64>,
}

/// Pushes `volume_bits` of fixed pseudo-random input through the extractor and
/// reports sustained rates. The input depends only on `volume_bits`, so runs
/// with different configurations see identical data.
pub fn throughput_benchmark(
    seed: &ToeplitzSeed,
    config: &ExtractorConfig,
    volume_bits: usize,
    workers: usize,
) -> Result<BenchReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5EED_BE7C);
    let words = (0..volume_bits.div_ceil(64)).map(|_| rng.next_u64()).collect();
    let raw = BitBlock::from_words(words, volume_bits);
    let ex = StreamExtractor::new(seed, config, workers)?;
    let (_, stats) = ex.extract_stream(&mut SliceBits::new(&raw), std::io::sink())?;
    let seconds = stats.elapsed.as_secs_f64();
    let rate = |bits: u64| (bits > 0 && seconds > 0.0).then(|| bits as f64 / seconds);
    Ok(BenchReport {
        j: config.j,
        k: config.k,
        group: config.group,
        block_count: config.block_count,
        workers,
        input_bits: stats.input_bits - stats.discarded_bits,
        output_bits: stats.output_bits,
        seconds,
        input_bps: rate(stats.input_bits - stats.discarded_bits),
        output_bps: rate(stats.output_bits),
        block_utilization: stats
            .blocks
            .iter()
            .map(|b| if seconds > 0.0 { b.busy.as_secs_f64() / seconds } else { 0.0 })
            .collect(),
    })
}
