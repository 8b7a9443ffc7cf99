//! Deterministic synthetic MovieLens-style corpus for offline runs.
//!
//! Writes `ratings.dat` (`user::item::rating::timestamp`) and `movies.dat`
//! (`item::title::genres`). User `i` (0-based) has a most recent rating whose
//! sentiment cycles like, neutral, dislike with `i % 3`.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const RATINGS_FILE: &str = "ratings.dat";
pub const MOVIES_FILE: &str = "movies.dat";

const ADJECTIVES: [&str; 16] = [
    "Silent", "Crimson", "Hidden", "Last", "Golden", "Broken", "Distant", "Wild", "Frozen", "Lost", "Bright", "Hollow",
    "Midnight", "Northern", "Secret", "Electric",
];
const NOUNS: [&str; 16] = [
    "River", "Empire", "Garden", "Harbor", "Signal", "Orchard", "Voyage", "Frontier", "Mirror", "Station", "Canyon",
    "Letter", "Kingdom", "Circus", "Lighthouse", "Archive",
];
const GENRES: [&str; 10] = [
    "Action", "Comedy", "Drama", "Thriller", "Romance", "Sci-Fi", "Horror", "Animation", "Documentary", "Western",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FixtureSpec {
    pub users: usize,
    /// Every user gets `min_interactions + (i % spread)` ratings.
    pub min_interactions: usize,
    pub spread: usize,
    pub items: usize,
    pub seed: u64,
}

impl FixtureSpec {
    /// The bundled 200-user corpus.
    pub fn standard() -> Self {
        Self {
            users: 200,
            min_interactions: 81,
            spread: 20,
            items: 400,
            seed: 20_240_601,
        }
    }

    /// Same generator with a user count divisible by three, so every target
    /// label occurs equally often.
    pub fn balanced() -> Self {
        Self {
            users: 198,
            ..Self::standard()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fixture {
    pub ratings: String,
    pub movies: String,
}

fn target_rating(user_index: usize, rng: &mut ChaCha8Rng) -> u32 {
    match user_index % 3 {
        0 => rng.random_range(4..=5),
        1 => 3,
        _ => rng.random_range(1..=2),
    }
}

pub fn generate(spec: &FixtureSpec) -> Fixture {
    assert!(spec.items >= spec.min_interactions + spec.spread, "not enough items for distinct ratings");
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut movies = String::new();
    for item in 1..=spec.items {
        let a = ADJECTIVES[rng.random_range(0..ADJECTIVES.len())];
        let n = NOUNS[rng.random_range(0..NOUNS.len())];
        let year = rng.random_range(1950..=2003);
        let g1 = rng.random_range(0..GENRES.len());
        let g2 = (g1 + rng.random_range(1..GENRES.len())) % GENRES.len();
        let genres = if rng.random_bool(0.5) {
            GENRES[g1].to_string()
        } else {
            format!("{}|{}", GENRES[g1], GENRES[g2])
        };
        let _ = writeln!(movies, "{item}::The {a} {n} ({year})::{genres}");
    }
    let mut ratings = String::new();
    for u in 0..spec.users {
        let n = spec.min_interactions + if spec.spread == 0 { 0 } else { u % spec.spread };
        let items = index::sample(&mut rng, spec.items, n).into_vec();
        let start = 956_703_932 + 86_400 * u as u64;
        // rows are written in item-draw order; timestamps rise with position
        // in `order`, whose last slot holds the target
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        for (row, item) in items.iter().enumerate() {
            let pos = order[row] as u64;
            let ts = start + 600 * pos + rng.random_range(0..300);
            let rating = if order[row] == n - 1 {
                target_rating(u, &mut rng)
            } else {
                rng.random_range(1..=5)
            };
            let _ = writeln!(ratings, "{}::{}::{rating}::{ts}", u + 1, item + 1);
        }
    }
    Fixture { ratings, movies }
}

pub fn write_fixture(dir: &Path, spec: &FixtureSpec) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    let f = generate(spec);
    std::fs::write(dir.join(RATINGS_FILE), f.ratings)?;
    std::fs::write(dir.join(MOVIES_FILE), f.movies)?;
    Ok(())
}
