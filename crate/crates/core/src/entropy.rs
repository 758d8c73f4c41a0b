//! Byte-level Shannon entropy normalized to [0, 1].

/// Byte histogram that can be fed incrementally.
#[derive(Clone, Debug)]
pub struct Histogram {
    counts: [u64; 256],
    total: u64,
}

impl Default for Histogram {
    fn default() -> Self {
        Histogram {
            counts: [0; 256],
            total: 0,
        }
    }
}

impl Histogram {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.counts[b as usize] += 1;
        }
        self.total += bytes.len() as u64;
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    /// Entropy in bits per byte divided by 8. Zero for an empty histogram.
    pub fn entropy(&self) -> f64 {
        if self.total == 0 {
            return 0.0;
        }
        let n = self.total as f64;
        let mut h = 0.0;
        for &c in &self.counts {
            if c > 0 {
                let p = c as f64 / n;
                h -= p * libm::log2(p);
            }
        }
        (h / 8.0).clamp(0.0, 1.0)
    }
}

pub fn payload_entropy(payload: &[u8]) -> f64 {
    let mut h = Histogram::new();
    h.add(payload);
    h.entropy()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec::Vec;
    use proptest::prelude::*;

    #[test]
    fn anchors() {
        assert_eq!(payload_entropy(&[0u8; 1024]), 0.0);
        let all: Vec<u8> = (0..=255).collect();
        assert_eq!(payload_entropy(&all), 1.0);
        assert_eq!(payload_entropy(b"aabb"), 0.125);
    }

    proptest! {
        #[test]
        fn bounded(data in proptest::collection::vec(any::<u8>(), 1..2048)) {
            let e = payload_entropy(&data);
            prop_assert!((0.0..=1.0).contains(&e));
        }

        #[test]
        fn self_concatenation_invariant(data in proptest::collection::vec(any::<u8>(), 1..2048)) {
            let mut doubled = data.clone();
            doubled.extend_from_slice(&data);
            prop_assert_eq!(payload_entropy(&doubled), payload_entropy(&data));
        }
    }
}
