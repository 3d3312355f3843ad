use std::collections::HashSet;

use guesswhich_core::analytics::{
    bootstrap_ci, coarse_round_rank, mann_whitney_u, mean_rank, mean_reciprocal_rank, question_ngram_distribution,
    tokenize,
};
use guesswhich_core::game::{induce_final_rank, Applied, GameState};
use guesswhich_core::payout::{compute_payout, Assignment, BonusConfig};
use guesswhich_core::pool::{sample_distractors, shell_of, ShellConfig};
use guesswhich_core::{EmbeddingStore, GameConfig, GameEvent, GameSession, ImageId, PoolSpec, SessionId, WorkerId};
use num_rational::Ratio;
use proptest::prelude::*;

fn img(i: usize) -> ImageId {
    ImageId::new(format!("img{i:03}"))
}

fn pool(n: usize, secret: usize) -> PoolSpec {
    PoolSpec {
        pool_id: "p".into(),
        secret_id: img(secret),
        caption: "a caption".into(),
        image_ids: (0..n).map(img).collect(),
        shell_provenance: None,
    }
}

fn session(n: usize, secret: usize, rounds: u32, caption: bool) -> GameSession {
    let cfg = GameConfig {
        dialog_rounds: rounds,
        pool_size: n as u32,
        caption_guess_required: caption,
    };
    GameSession::new(SessionId::new("s"), cfg, pool(n, secret), WorkerId::new("w"), "agent").unwrap()
}

#[derive(Debug, Clone)]
enum Ev {
    Caption(usize),
    Question(bool),
    Answer(bool),
    Round(usize),
    Final(usize),
}

fn to_event(e: &Ev) -> GameEvent {
    let text = |ok: bool| if ok { "is it red?".to_owned() } else { "   ".to_owned() };
    match e {
        Ev::Caption(i) => GameEvent::CaptionGuess { image_id: img(*i) },
        Ev::Question(ok) => GameEvent::QuestionAsked { text: text(*ok) },
        Ev::Answer(ok) => GameEvent::AnswerReceived { text: text(*ok) },
        Ev::Round(i) => GameEvent::RoundGuess { image_id: img(*i) },
        Ev::Final(i) => GameEvent::FinalGuess { image_id: img(*i) },
    }
}

fn ev_strategy(n: usize) -> impl Strategy<Value = Ev> {
    // Indices up to n + 1 include images outside the pool.
    prop_oneof![
        (0..n + 2).prop_map(Ev::Caption),
        any::<bool>().prop_map(Ev::Question),
        any::<bool>().prop_map(Ev::Answer),
        (0..n + 2).prop_map(Ev::Round),
        (0..n + 2).prop_map(Ev::Final),
    ]
}

/// A legal full game: caption guess, `rounds` x (question, answer, guess),
/// then the pool in `order` until the secret is hit.
fn legal_game(n: usize, rounds: u32, caption: bool, guesses: &[usize], order: &[usize]) -> Vec<GameEvent> {
    let mut evs = Vec::new();
    if caption {
        evs.push(GameEvent::CaptionGuess { image_id: img(guesses[0] % n) });
    }
    for r in 0..rounds as usize {
        evs.push(GameEvent::QuestionAsked { text: format!("question {r}?") });
        evs.push(GameEvent::AnswerReceived { text: "no".into() });
        evs.push(GameEvent::RoundGuess { image_id: img(guesses[r + 1] % n) });
    }
    for &i in order {
        evs.push(GameEvent::FinalGuess { image_id: img(i) });
    }
    evs
}

fn permutation(n: usize) -> impl Strategy<Value = Vec<usize>> {
    Just((0..n).collect::<Vec<_>>()).prop_shuffle()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    /// Rejected events never change the session; accepted ones never leave
    /// the documented state graph; a completed game has a rank in [1, n].
    #[test]
    fn random_streams_respect_the_state_machine(
        n in 2usize..8,
        secret_seed in any::<usize>(),
        rounds in 1u32..5,
        caption in any::<bool>(),
        stream in prop::collection::vec(ev_strategy(8), 0..80),
    ) {
        let secret = secret_seed % n;
        let mut s = session(n, secret, rounds, caption);
        for (t, e) in stream.iter().enumerate() {
            let before = serde_json::to_string(&s).unwrap();
            let was_terminal = s.state.is_terminal();
            match s.apply(&to_event(e), t as u64) {
                Ok(applied) => {
                    prop_assert!(!was_terminal);
                    if let Applied::Completed { rank } = applied {
                        prop_assert!(rank >= 1 && rank as usize <= n);
                        prop_assert_eq!(s.state, GameState::Complete);
                        prop_assert_eq!(s.induced_rank, Some(rank));
                        prop_assert_eq!(s.final_guesses.last(), Some(&img(secret)));
                    }
                }
                Err(_) => prop_assert_eq!(before, serde_json::to_string(&s).unwrap()),
            }
            prop_assert!(s.rounds.len() <= rounds as usize);
            if s.state == GameState::FinalGuessing || s.state == GameState::Complete {
                prop_assert_eq!(s.rounds.len(), rounds as usize);
                prop_assert!(s.rounds.iter().all(|r| r.is_complete()));
            }
        }
    }

    /// A legal stream always completes, with the rank equal to the secret's
    /// position in the final-guess order and every round recorded.
    #[test]
    fn legal_games_complete_with_positional_rank(
        n in 2usize..25,
        secret_seed in any::<usize>(),
        rounds in 1u32..10,
        caption in any::<bool>(),
        guesses in prop::collection::vec(any::<usize>(), 10),
        order in permutation(24),
    ) {
        let secret = secret_seed % n;
        let order: Vec<usize> = order.into_iter().filter(|&i| i < n).collect();
        let mut s = session(n, secret, rounds, caption);
        let evs = legal_game(n, rounds, caption, &guesses, &order);
        let mut last = None;
        for (t, e) in evs.iter().enumerate() {
            if s.state.is_terminal() {
                prop_assert!(s.apply(e, t as u64).is_err());
                continue;
            }
            last = Some(s.apply(e, t as u64).unwrap());
        }
        let expected = order.iter().position(|&i| i == secret).unwrap() as u32 + 1;
        prop_assert_eq!(last, Some(Applied::Completed { rank: expected }));
        prop_assert_eq!(s.rounds.len(), rounds as usize);
        let finals: Vec<ImageId> = order.iter().take(expected as usize).map(|&i| img(i)).collect();
        prop_assert_eq!(induce_final_rank(&finals, &img(secret)), Ok(expected));
    }

    #[test]
    fn payout_stays_within_caps(
        games in prop::collection::vec((0usize..20, prop::collection::vec(any::<usize>(), 10), permutation(20)), 1..6),
    ) {
        let mut sessions = Vec::new();
        for (secret, guesses, order) in &games {
            let mut s = session(20, *secret, 9, true);
            for (t, e) in legal_game(20, 9, true, guesses, order).iter().enumerate() {
                if s.state.is_terminal() { break; }
                s.apply(e, t as u64).unwrap();
            }
            sessions.push(s);
        }
        let a = Assignment {
            assignment_id: "a".into(),
            worker_id: WorkerId::new("w"),
            condition: "c".into(),
            game_sessions: sessions,
            survey: None,
        };
        let cfg = BonusConfig::default();
        let p = compute_payout(&a, &cfg).unwrap();
        prop_assert_eq!(p.base, 5.0);
        prop_assert!((0.0..=1.0).contains(&p.round_bonus));
        prop_assert!((0.0..=2.0).contains(&p.rank_bonus));
        prop_assert!((p.total - (p.base + p.round_bonus + p.rank_bonus)).abs() < 1e-12);
    }

    /// MR and MRR agree with exact rational arithmetic.
    #[test]
    fn metrics_match_rational_oracle(ranks in prop::collection::vec(1u32..=20, 1..200)) {
        let n = ranks.len() as i64;
        let mr = Ratio::new(ranks.iter().map(|&r| i64::from(r)).sum::<i64>(), n);
        let mrr = ranks
            .iter()
            .map(|&r| Ratio::new(1i64, i64::from(r)))
            .fold(Ratio::from_integer(0), |a, b| a + b)
            / Ratio::from_integer(n);
        let to_f = |r: Ratio<i64>| *r.numer() as f64 / *r.denom() as f64;
        prop_assert!((mean_rank(&ranks).unwrap() - to_f(mr)).abs() < 1e-9);
        prop_assert!((mean_reciprocal_rank(&ranks).unwrap() - to_f(mrr)).abs() < 1e-9);
    }

    #[test]
    fn mann_whitney_invariants(
        a in prop::collection::vec(0u8..10, 1..30),
        b in prop::collection::vec(0u8..10, 1..30),
    ) {
        let a: Vec<f64> = a.into_iter().map(f64::from).collect();
        let b: Vec<f64> = b.into_iter().map(f64::from).collect();
        let ab = mann_whitney_u(&a, &b).unwrap();
        let ba = mann_whitney_u(&b, &a).unwrap();
        prop_assert_eq!(ab.u_a + ab.u_b, (a.len() * b.len()) as f64);
        prop_assert_eq!(ab.u_a, ba.u_b);
        prop_assert!((ab.p_two_sided - ba.p_two_sided).abs() < 1e-12);
        prop_assert!(ab.p_two_sided > 0.0 && ab.p_two_sided <= 1.0);
        // Brute-force pair count.
        let pairs: f64 = a
            .iter()
            .flat_map(|x| b.iter().map(move |y| if x > y { 1.0 } else if x == y { 0.5 } else { 0.0 }))
            .sum();
        prop_assert_eq!(ab.u_a, pairs);
    }

    #[test]
    fn bootstrap_interval_is_ordered_and_bounded(
        values in prop::collection::vec(-100.0f64..100.0, 2..60),
        seed in any::<u64>(),
    ) {
        let ci = bootstrap_ci(&values, 200, 0.95, seed).unwrap();
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(ci.lo <= ci.hi);
        prop_assert!(ci.lo >= min - 1e-9 && ci.hi <= max + 1e-9);
        prop_assert_eq!(bootstrap_ci(&values, 200, 0.95, seed).unwrap(), ci);
    }

    #[test]
    fn ngram_children_never_exceed_parent(questions in prop::collection::vec("[a-c ]{0,12}\\??", 0..40)) {
        let tree = question_ngram_distribution(&questions, 3).unwrap();
        let nonempty = questions.iter().filter(|q| !tokenize(q).is_empty()).count();
        let root: usize = tree.children.iter().map(|c| c.count).sum();
        prop_assert_eq!(root, nonempty);
        for (prefix, count) in tree.rows() {
            let refs: Vec<&str> = prefix.iter().map(String::as_str).collect();
            prop_assert_eq!(tree.count(&refs), count);
            if prefix.len() > 1 {
                prop_assert!(tree.count(&refs[..refs.len() - 1]) >= count);
            }
        }
    }
}

fn random_store(points: &[Vec<f32>]) -> EmbeddingStore {
    EmbeddingStore::from_entries(points.iter().enumerate().map(|(i, v)| (img(i), v.clone()))).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    /// Every sampled distractor sits in its declared shell, the pool has no
    /// duplicates, and the same seed reproduces the same pool.
    #[test]
    fn sampled_pools_respect_shells(
        points in prop::collection::vec(prop::collection::vec(-3.0f32..3.0, 3), 60..120),
        secret_seed in any::<usize>(),
        counts in prop::collection::vec(0usize..4, 1..4),
        radius in 0.5f64..2.0,
        seed in any::<u64>(),
    ) {
        let store = random_store(&points);
        let secret = img(secret_seed % points.len());
        let cfg = ShellConfig::new(radius, counts.clone(), seed);
        let Ok(pool) = sample_distractors(&store, &secret, &cfg, "p", "cap") else {
            return Ok(());
        };
        let again = sample_distractors(&store, &secret, &cfg, "p", "cap").unwrap();
        prop_assert_eq!(&pool, &again);
        prop_assert_eq!(pool.len(), 1 + counts.iter().sum::<usize>());
        let unique: HashSet<&ImageId> = pool.image_ids.iter().collect();
        prop_assert_eq!(unique.len(), pool.len());
        prop_assert!(pool.contains(&secret));
        let prov = pool.shell_provenance.as_ref().unwrap();
        let radii = cfg.radii();
        let mut per_shell = vec![0usize; counts.len()];
        for m in &prov.members {
            let d = store.distance(&secret, &m.image_id).unwrap();
            prop_assert_eq!(shell_of(d, &radii), Some(m.shell));
            per_shell[m.shell] += 1;
        }
        prop_assert_eq!(per_shell, counts);
    }

    #[test]
    fn coarse_rank_is_a_position(
        points in prop::collection::vec(prop::collection::vec(-3.0f32..3.0, 2), 2..25),
        g in any::<usize>(),
        s in any::<usize>(),
    ) {
        let n = points.len();
        let store = random_store(&points);
        let p = pool(n, s % n);
        let r = coarse_round_rank(&store, &p, &img(g % n), &img(s % n)).unwrap();
        prop_assert!(r >= 1 && r as usize <= n);
        prop_assert_eq!(coarse_round_rank(&store, &p, &img(s % n), &img(s % n)).unwrap(), 1);
    }
}
