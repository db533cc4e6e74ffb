use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::rng::Rng;

/// How a feature map is split into non-overlapping spatial patches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum SplitScheme {
    /// Two patches, up/down, split row drawn from the middle third.
    #[default]
    P2UdRandom,
    /// Two patches, left/right, split column drawn from the middle third.
    P2LrRandom,
    P2UdEqual,
    P2LrEqual,
    P4Equal,
    /// 2×2 grid with both split lines drawn from the middle third.
    P4Random,
    P9Equal,
}

impl SplitScheme {
    pub const ALL: [SplitScheme; 7] = [
        SplitScheme::P2UdRandom,
        SplitScheme::P2LrRandom,
        SplitScheme::P2UdEqual,
        SplitScheme::P2LrEqual,
        SplitScheme::P4Equal,
        SplitScheme::P4Random,
        SplitScheme::P9Equal,
    ];

    pub fn patch_count(self) -> usize {
        match self {
            SplitScheme::P2UdRandom | SplitScheme::P2LrRandom | SplitScheme::P2UdEqual | SplitScheme::P2LrEqual => 2,
            SplitScheme::P4Equal | SplitScheme::P4Random => 4,
            SplitScheme::P9Equal => 9,
        }
    }

    pub fn is_random(self) -> bool {
        matches!(
            self,
            SplitScheme::P2UdRandom | SplitScheme::P2LrRandom | SplitScheme::P4Random
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            SplitScheme::P2UdRandom => "P2-UD-random",
            SplitScheme::P2LrRandom => "P2-LR-random",
            SplitScheme::P2UdEqual => "P2-UD-equal",
            SplitScheme::P2LrEqual => "P2-LR-equal",
            SplitScheme::P4Equal => "P4-equal",
            SplitScheme::P4Random => "P4-random",
            SplitScheme::P9Equal => "P9-equal",
        }
    }
}

impl fmt::Display for SplitScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SplitScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("P9-random") {
            return Err(Error::Config(
                "split scheme P9-random is not supported: random nine-way splits do not converge".into(),
            ));
        }
        SplitScheme::ALL
            .into_iter()
            .find(|scheme| scheme.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                let valid: Vec<_> = SplitScheme::ALL.iter().map(|s| s.name()).collect();
                Error::Config(format!("unknown split scheme {s:?}; valid: {}", valid.join(", ")))
            })
    }
}

/// Half-open patch extent `[h0, h1) × [w0, w1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PatchBounds {
    pub h0: usize,
    pub h1: usize,
    pub w0: usize,
    pub w1: usize,
}

impl PatchBounds {
    pub fn area(&self) -> usize {
        (self.h1 - self.h0) * (self.w1 - self.w0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchPartition {
    /// `None` for the single whole-map patch used by instance-level baselines.
    pub scheme: Option<SplitScheme>,
    pub height: usize,
    pub width: usize,
    pub patches: Vec<PatchBounds>,
}

impl PatchPartition {
    pub fn whole(height: usize, width: usize) -> Self {
        Self {
            scheme: None,
            height,
            width,
            patches: vec![PatchBounds {
                h0: 0,
                h1: height,
                w0: 0,
                w1: width,
            }],
        }
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    /// Patch index of every pixel of an `H × W` plane.
    pub fn pixel_owner(&self) -> Vec<usize> {
        let mut owner = vec![usize::MAX; self.height * self.width];
        for (p, b) in self.patches.iter().enumerate() {
            for h in b.h0..b.h1 {
                owner[h * self.width + b.w0..h * self.width + b.w1].fill(p);
            }
        }
        owner
    }

    fn grid(scheme: SplitScheme, height: usize, width: usize, rows: &[usize], cols: &[usize]) -> Self {
        let mut patches = Vec::with_capacity((rows.len() - 1) * (cols.len() - 1));
        for r in rows.windows(2) {
            for c in cols.windows(2) {
                patches.push(PatchBounds {
                    h0: r[0],
                    h1: r[1],
                    w0: c[0],
                    w1: c[1],
                });
            }
        }
        Self {
            scheme: Some(scheme),
            height,
            width,
            patches,
        }
    }
}

/// Split position drawn uniformly from `[⌈n/3⌉, ⌊2n/3⌋]`.
fn random_split(n: usize, rng: &mut Rng) -> Result<usize> {
    rng.int_inclusive(n.div_ceil(3), 2 * n / 3)
}

/// Boundaries of three near-equal cells; the remainder goes to the last cell.
fn thirds(n: usize) -> [usize; 4] {
    let cell = n / 3;
    [0, cell, 2 * cell, n]
}

pub fn make_partition(height: usize, width: usize, scheme: SplitScheme, rng: &mut Rng) -> Result<PatchPartition> {
    let (min_h, min_w) = match scheme {
        SplitScheme::P2UdRandom => (3, 1),
        SplitScheme::P2LrRandom => (1, 3),
        SplitScheme::P2UdEqual => (2, 1),
        SplitScheme::P2LrEqual => (1, 2),
        SplitScheme::P4Equal => (2, 2),
        SplitScheme::P4Random => (3, 3),
        SplitScheme::P9Equal => (3, 3),
    };
    if height < min_h || width < min_w {
        return Err(Error::invalid(format!(
            "feature map {height}×{width} too small for {scheme} (needs at least {min_h}×{min_w})"
        )));
    }
    let (h, w) = (height, width);
    let part = match scheme {
        SplitScheme::P2UdRandom => {
            let s = random_split(h, rng)?;
            PatchPartition::grid(scheme, h, w, &[0, s, h], &[0, w])
        }
        SplitScheme::P2LrRandom => {
            let s = random_split(w, rng)?;
            PatchPartition::grid(scheme, h, w, &[0, h], &[0, s, w])
        }
        SplitScheme::P2UdEqual => PatchPartition::grid(scheme, h, w, &[0, h / 2, h], &[0, w]),
        SplitScheme::P2LrEqual => PatchPartition::grid(scheme, h, w, &[0, h], &[0, w / 2, w]),
        SplitScheme::P4Equal => PatchPartition::grid(scheme, h, w, &[0, h / 2, h], &[0, w / 2, w]),
        SplitScheme::P4Random => {
            let sr = random_split(h, rng)?;
            let sc = random_split(w, rng)?;
            PatchPartition::grid(scheme, h, w, &[0, sr, h], &[0, sc, w])
        }
        SplitScheme::P9Equal => PatchPartition::grid(scheme, h, w, &thirds(h), &thirds(w)),
    };
    Ok(part)
}
