//! One bit per `{-1, +1}` element: `+1` is a set bit, `-1` a clear one.
//! Element `i` lives in bit `i % 64` of word `i / 64` and unused high bits
//! of the last word stay clear.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const WORD_BITS: usize = 64;

pub fn words_for(bits: usize) -> usize {
    bits.div_ceil(WORD_BITS)
}

/// Mask of the valid bits in the last word of a `len`-bit row.
pub fn tail_mask(len: usize) -> u64 {
    match len % WORD_BITS {
        0 => u64::MAX,
        r => (1u64 << r) - 1,
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackedBits {
    len: usize,
    words: Vec<u64>,
}

impl PackedBits {
    /// Wraps raw words, clearing any bit past `len`.
    pub fn from_words(len: usize, mut words: Vec<u64>) -> Result<Self> {
        if words.len() != words_for(len) {
            return Err(Error::Shape(format!(
                "{len} bits need {} words, got {}",
                words_for(len),
                words.len()
            )));
        }
        if let Some(last) = words.last_mut() {
            *last &= tail_mask(len);
        }
        Ok(Self { len, words })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn get(&self, i: usize) -> bool {
        self.words[i / WORD_BITS] >> (i % WORD_BITS) & 1 == 1
    }

    pub fn unpack(&self) -> Vec<f64> {
        (0..self.len)
            .map(|i| if self.get(i) { 1.0 } else { -1.0 })
            .collect()
    }
}

/// Packs a `{-1, +1}` slice; any other value is rejected with its index.
pub fn pack_bits(x: &[f64]) -> Result<PackedBits> {
    let mut words = vec![0u64; words_for(x.len())];
    pack_into(x, &mut words)?;
    Ok(PackedBits {
        len: x.len(),
        words,
    })
}

/// Packs `x` into the leading bits of `words`, which must start clear.
pub(crate) fn pack_into(x: &[f64], words: &mut [u64]) -> Result<()> {
    for (i, &v) in x.iter().enumerate() {
        if v == 1.0 {
            words[i / WORD_BITS] |= 1 << (i % WORD_BITS);
        } else if v != -1.0 {
            return Err(Error::NotBinary { index: i, value: v });
        }
    }
    Ok(())
}

/// `sum_i a_i b_i` of two packed `{-1, +1}` rows, computed as
/// `2 * popcount(xnor(a, b)) - n` over the valid bits.
pub fn xnor_popcount_dot(a: &PackedBits, b: &PackedBits) -> Result<i64> {
    if a.len != b.len {
        return Err(Error::Contract(format!(
            "dot of rows with {} and {} valid bits",
            a.len, b.len
        )));
    }
    let n = a.len;
    if n == 0 {
        return Ok(0);
    }
    let last = a.words.len() - 1;
    let mut agree = 0u64;
    for (i, (x, y)) in a.words.iter().zip(&b.words).enumerate() {
        let mask = if i == last { tail_mask(n) } else { u64::MAX };
        agree += u64::from((!(x ^ y) & mask).count_ones());
    }
    Ok(2 * agree as i64 - n as i64)
}

/// Number of set bits in `a XOR b` over equally long word slices.
pub type XorPopcount = fn(&[u64], &[u64]) -> u32;

fn xor_popcount_portable(a: &[u64], b: &[u64]) -> u32 {
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum()
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "popcnt")]
unsafe fn xor_popcount_popcnt_impl(a: &[u64], b: &[u64]) -> u32 {
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum()
}

#[cfg(target_arch = "x86_64")]
fn xor_popcount_popcnt(a: &[u64], b: &[u64]) -> u32 {
    // SAFETY: only selected after `popcnt` was detected at runtime.
    unsafe { xor_popcount_popcnt_impl(a, b) }
}

/// XOR popcounts of one `patch` against `out.len()` rows stored
/// column-major: word `j` of row `o` sits at `columns[j * out.len() + o]`.
/// Results go to `out`.
pub type XorPopcountColumns = fn(&[u64], &[u64], &mut [u32]);

#[inline(always)]
fn columns_body(patch: &[u64], columns: &[u64], out: &mut [u32]) {
    out.fill(0);
    let rows = out.len();
    for (&p, col) in patch.iter().zip(columns.chunks_exact(rows)) {
        // a row holds far fewer than 2^32 bits; wrapping keeps overflow
        // checks from blocking vectorization
        for (acc, &w) in out.iter_mut().zip(col) {
            *acc = acc.wrapping_add((p ^ w).count_ones());
        }
    }
}

fn xor_popcount_columns_portable(patch: &[u64], columns: &[u64], out: &mut [u32]) {
    columns_body(patch, columns, out)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "popcnt")]
unsafe fn xor_popcount_columns_popcnt_impl(patch: &[u64], columns: &[u64], out: &mut [u32]) {
    columns_body(patch, columns, out)
}

#[cfg(target_arch = "x86_64")]
fn xor_popcount_columns_popcnt(patch: &[u64], columns: &[u64], out: &mut [u32]) {
    // SAFETY: only selected after `popcnt` was detected at runtime.
    unsafe { xor_popcount_columns_popcnt_impl(patch, columns, out) }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f,avx512vpopcntdq,popcnt")]
unsafe fn xor_popcount_columns_avx512_impl(patch: &[u64], columns: &[u64], out: &mut [u32]) {
    columns_body(patch, columns, out)
}

#[cfg(target_arch = "x86_64")]
fn xor_popcount_columns_avx512(patch: &[u64], columns: &[u64], out: &mut [u32]) {
    // SAFETY: only selected after the features were detected at runtime.
    unsafe { xor_popcount_columns_avx512_impl(patch, columns, out) }
}

/// The fastest column-major XOR-popcount kernel this CPU supports.
pub fn xor_popcount_columns_kernel() -> XorPopcountColumns {
    static KERNEL: OnceLock<XorPopcountColumns> = OnceLock::new();
    *KERNEL.get_or_init(|| {
        #[cfg(target_arch = "x86_64")]
        {
            if std::arch::is_x86_feature_detected!("avx512f")
                && std::arch::is_x86_feature_detected!("avx512vpopcntdq")
            {
                return xor_popcount_columns_avx512 as XorPopcountColumns;
            }
            if std::arch::is_x86_feature_detected!("popcnt") {
                return xor_popcount_columns_popcnt as XorPopcountColumns;
            }
        }
        xor_popcount_columns_portable
    })
}

/// The fastest XOR-popcount kernel this CPU supports.
pub fn xor_popcount_kernel() -> XorPopcount {
    static KERNEL: OnceLock<XorPopcount> = OnceLock::new();
    *KERNEL.get_or_init(|| {
        #[cfg(target_arch = "x86_64")]
        if std::arch::is_x86_feature_detected!("popcnt") {
            return xor_popcount_popcnt as XorPopcount;
        }
        xor_popcount_portable
    })
}
