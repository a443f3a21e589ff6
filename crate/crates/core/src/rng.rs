//! Named, independent random sub-streams derived from one run seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The streams a run draws from. Toggling one component never shifts the
/// numbers another component sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Data,
    Init,
    Aug,
    Rpa,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Data => 0x6461_7461,
            Stream::Init => 0x696e_6974,
            Stream::Aug => 0x6175_6700,
            Stream::Rpa => 0x7270_6100,
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic generator for `(seed, stream, index)`.
pub fn substream(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let key = splitmix(splitmix(seed ^ stream.tag().rotate_left(17)) ^ index.wrapping_mul(0xd6e8_feb8_6659_fd93));
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(stream.tag());
    rng
}
