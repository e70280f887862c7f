use rand::{RngCore, SeedableRng};
use rand_xoshiro::{SplitMix64, Xoshiro256PlusPlus};

use super::trace::NodeId;

/// Logarithmic size parameters shared by every protocol.
///
/// `height_cap` is the cap applied to geometric draws (the paper-style
/// "log n", fixed as `ceil(log2 n)` and floored at 1 for a single node);
/// `round_space` is its square, the sub-round space used by the
/// count-distinct suppression race.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LogParams {
    l: u32,
    l2: u32,
}

impl LogParams {
    pub fn for_nodes(n: u32) -> Self {
        assert!(n >= 1, "node count must be positive");
        let l = ceil_log2(n).max(1);
        Self { l, l2: l * l }
    }

    #[inline]
    pub fn height_cap(&self) -> u32 {
        self.l
    }

    #[inline]
    pub fn round_space(&self) -> u32 {
        self.l2
    }
}

/// `ceil(log2 n)` for `n >= 1`.
pub fn ceil_log2(n: u32) -> u32 {
    assert!(n >= 1);
    32 - (n - 1).leading_zeros().min(32)
}

/// Draws `min(cap, G)` where `G` is geometric with success probability 1/2
/// and support starting at 1, so `P[h = k] = 2^-k` for `k < cap` and
/// `P[h = cap] = 2^-(cap-1)`.
#[inline]
pub fn geometric_height<R: RngCore + ?Sized>(rng: &mut R, cap: u32) -> u32 {
    debug_assert!(cap >= 1);
    let mut zeros = 0u32;
    loop {
        let word = rng.next_u64();
        if word == 0 {
            zeros += 64;
            if zeros >= cap {
                return cap;
            }
            continue;
        }
        return cap.min(zeros + word.trailing_zeros() + 1);
    }
}

/// Seeded randomness for one simulation run: one private stream per node and
/// one for the server. Equal master seeds give bit-identical streams.
#[derive(Debug, Clone)]
pub struct RngContext {
    master: u64,
    server: Xoshiro256PlusPlus,
    nodes: Vec<Xoshiro256PlusPlus>,
}

impl RngContext {
    pub fn new(master_seed: u64, n: u32) -> Self {
        let mut seeder = SplitMix64::seed_from_u64(master_seed);
        let server = Xoshiro256PlusPlus::from_rng(&mut seeder);
        let nodes = (0..n)
            .map(|_| Xoshiro256PlusPlus::from_rng(&mut seeder))
            .collect();
        Self {
            master: master_seed,
            server,
            nodes,
        }
    }

    pub fn master_seed(&self) -> u64 {
        self.master
    }

    #[inline]
    pub fn node_rng(&mut self, id: NodeId) -> &mut Xoshiro256PlusPlus {
        &mut self.nodes[(id - 1) as usize]
    }

    #[inline]
    pub fn server_rng(&mut self) -> &mut Xoshiro256PlusPlus {
        &mut self.server
    }
}

/// Derives an independent seed from a master seed and an index (used to fan
/// out experiment trials). SplitMix64 step plus finalizer.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let z = master.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E3779B97F4A7C15));
    let z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    let z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}
