//! Constructed datasets with known structure, used to exercise the pipeline
//! end to end without licensed data.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::corpus::{preprocess_text, CleanText};

const GREETINGS: &[&str] = &["hola", "buenos días", "buenas noches", "qué tal", "ey", "buenas tardes", "saludos", "oye"];
const SUBJECTS: &[&str] = &[
    "mi hermana",
    "el vecino",
    "mi jefe",
    "la profe",
    "mi abuela",
    "el gobierno",
    "mi primo",
    "la selección",
    "mi compañero",
    "el alcalde",
    "la vecina del quinto",
    "mi novio",
    "el entrenador",
    "la presentadora",
    "mi cuñado",
    "el periódico",
];
const VERBS: &[&str] = &[
    "veo", "leo", "comento", "escucho", "sigo", "odio", "adoro", "comparto", "critico", "recomiendo", "descubro", "analizo",
];
const PAST: &[&str] = &[
    "dijo", "publicó", "votó", "negó", "confirmó", "vendió", "anunció", "compartió", "escribió", "prometió",
];
const TOPICS: &[&str] = &[
    "el partido",
    "las noticias",
    "la serie",
    "el concierto",
    "la película",
    "el debate",
    "la final",
    "el tráfico",
    "la lluvia",
    "el examen",
    "la huelga",
    "el festival",
    "la receta",
    "el documental",
    "la campaña",
    "el aeropuerto",
    "la manifestación",
    "el mercado",
];
const PLACES: &[&str] = &[
    "madrid", "sevilla", "valencia", "bilbao", "málaga", "zaragoza", "granada", "salamanca", "cádiz", "oviedo", "murcia",
    "toledo",
];
const ADJECTIVES: &[&str] = &[
    "increíble", "horrible", "normal", "genial", "raro", "aburrido", "precioso", "ridículo", "emocionante", "tremendo",
];
const TAGS: &[&str] = &["futbol", "lunes", "viernes", "cine", "musica", "politica", "verano", "finde"];
const HANDLES: &[&str] = &["pepe_88", "laura", "martaSP", "el_tio", "user123"];

fn pick<'a, R: Rng + ?Sized>(rng: &mut R, xs: &[&'a str]) -> &'a str {
    xs.choose(rng).unwrap()
}

/// `n` short tweets filled from a handful of templates, normalized as the
/// corpus stage would (mentions and links become placeholders).
pub fn template_tweets(n: usize, seed: u64) -> Vec<CleanText> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let raw = match rng.random_range(0..7) {
                0 => format!(
                    "{} @{} ¿viste {}?",
                    pick(&mut rng, GREETINGS),
                    pick(&mut rng, HANDLES),
                    pick(&mut rng, TOPICS)
                ),
                1 => format!(
                    "hoy {} {} en {} y fue {}",
                    pick(&mut rng, VERBS),
                    pick(&mut rng, TOPICS),
                    pick(&mut rng, PLACES),
                    pick(&mut rng, ADJECTIVES)
                ),
                2 => format!(
                    "no puedo creer que {} {} eso de {}",
                    pick(&mut rng, SUBJECTS),
                    pick(&mut rng, PAST),
                    pick(&mut rng, TOPICS)
                ),
                3 => format!(
                    "{} dice que {} es {} https://t.co/{:x}",
                    pick(&mut rng, SUBJECTS),
                    pick(&mut rng, TOPICS),
                    pick(&mut rng, ADJECTIVES),
                    rng.random::<u32>()
                ),
                4 => format!(
                    "mañana voy a {} con {} #{}",
                    pick(&mut rng, PLACES),
                    pick(&mut rng, SUBJECTS),
                    pick(&mut rng, TAGS)
                ),
                5 => format!(
                    "{} grados en {} a las {} y {} sin empezar",
                    rng.random_range(-5..45),
                    pick(&mut rng, PLACES),
                    rng.random_range(1..13),
                    pick(&mut rng, TOPICS)
                ),
                _ => format!(
                    "@{} {} {} {} en {}",
                    pick(&mut rng, HANDLES),
                    pick(&mut rng, SUBJECTS),
                    pick(&mut rng, PAST),
                    pick(&mut rng, TOPICS),
                    pick(&mut rng, PLACES)
                ),
            };
            preprocess_text(&raw)
        })
        .collect()
}

const CLASS_WORDS: [&[&str]; 2] = [
    &["sol", "playa", "verano", "calor", "arena", "olas", "helado", "vacaciones"],
    &["nieve", "frío", "invierno", "bufanda", "hielo", "abrigo", "montaña", "esquí"],
];
const FILLER: &[&str] = &["hoy", "me", "gusta", "mucho", "el", "la", "de", "y", "que", "muy", "otra", "vez"];

/// Texts whose class is fixed by which of two disjoint keyword sets they
/// draw from. Filler words are shared by both classes. Classes alternate so
/// the data are balanced.
pub fn keyword_sequences(n: usize, seed: u64) -> Vec<(String, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let label = i % 2;
            let len = rng.random_range(4..9);
            let mut words: Vec<&str> = (0..len).map(|_| pick(&mut rng, FILLER)).collect();
            for _ in 0..2 {
                let at = rng.random_range(0..=words.len());
                words.insert(at, pick(&mut rng, CLASS_WORDS[label]));
            }
            (words.join(" "), label)
        })
        .collect()
}

/// Like [`keyword_sequences`] but with a `minority_every`-to-one imbalance:
/// every `minority_every`-th item is class 1.
pub fn imbalanced_keyword_sequences(n: usize, minority_every: usize, seed: u64) -> Vec<(String, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let label = usize::from(i % minority_every == minority_every - 1);
            let len = rng.random_range(4..9);
            let mut words: Vec<&str> = (0..len).map(|_| pick(&mut rng, FILLER)).collect();
            let at = rng.random_range(0..=words.len());
            words.insert(at, pick(&mut rng, CLASS_WORDS[label]));
            (words.join(" "), label)
        })
        .collect()
}

const PEOPLE: &[&str] = &["ana", "luis", "marta", "jorge", "lucía", "pablo"];
const CITIES: &[&str] = &["madrid", "sevilla", "lima", "quito", "bogotá", "méxico"];

/// Sentences of `(word, tag)` pairs where names are `PER`, cities `LOC` and
/// everything else `O`, so the tag is a function of the word.
pub fn keyword_token_sentences(n: usize, seed: u64) -> Vec<Vec<(String, String)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let len = rng.random_range(4..9);
            (0..len)
                .map(|_| {
                    let (w, t) = match rng.random_range(0..4) {
                        0 => (pick(&mut rng, PEOPLE), "PER"),
                        1 => (pick(&mut rng, CITIES), "LOC"),
                        _ => (pick(&mut rng, FILLER), "O"),
                    };
                    (w.to_string(), t.to_string())
                })
                .collect()
        })
        .collect()
}

/// Per-author tweet vectors for two classes whose means differ but whose
/// per-dimension maxima coincide.
///
/// Class 0 draws each coordinate from N(0, 1); class 1 from N(0.5, 0.8²).
/// With 100 tweets the expected maximum of a standard normal is about
/// 2.5076, so the class-1 maximum sits at 0.5 + 0.8·2.5076 ≈ 2.506, while the
/// per-author means stay about 5 standard errors apart.
pub fn two_gaussian_authors(
    n_authors: usize,
    tweets_per_author: usize,
    dim: usize,
    seed: u64,
) -> Vec<(Vec<Vec<f64>>, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dists = [Normal::new(0.0, 1.0).unwrap(), Normal::new(0.5, 0.8).unwrap()];
    (0..n_authors)
        .map(|i| {
            let label = i % 2;
            let tweets = (0..tweets_per_author)
                .map(|_| (0..dim).map(|_| dists[label].sample(&mut rng)).collect())
                .collect();
            (tweets, label)
        })
        .collect()
}
