use proptest::prelude::*;
use qkd_core::bounds::{expected_observables, security_result, Observables};
use qkd_core::channel::ChannelModel;
use qkd_core::oracle::{
    end_to_end_scenario, informative_scenario, random_constants, run_suite, Suite, SuiteOptions,
};
use qkd_core::postprocessing::n_ec;
use qkd_core::protocol::{run_protocol, Outcome, RunOptions};
use qkd_core::ProtocolConstants;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn channel(loss_db: f64, e_mis: f64) -> ChannelModel {
    ChannelModel::with_loss_db(loss_db, 0.5, e_mis, 1e-6).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn key_length_accounting(seed in any::<u64>(), loss in 0.0f64..30.0, e_mis in 0.0f64..0.05) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = random_constants(&mut rng, 10_000_000);
        let ch = channel(loss, e_mis);
        let exp = expected_observables(&c, &ch);
        let obs = exp.rounded();
        let ec = n_ec(obs.n_sift, c.e_bit_assumed, 1.16).unwrap();
        let r = security_result(&c, &obs, &exp, ec).unwrap();
        prop_assert!(r.n1z_lower <= obs.n_sift);
        prop_assert_eq!(r.n_fin, obs.n_sift as i64 - r.n_pa as i64 - ec as i64 - c.n_verify as i64);
        prop_assert_eq!(r.abort, r.n_fin <= 0);
        prop_assert_eq!(r.key_length, r.n_fin.max(0) as u64);
        prop_assert_eq!(r.eps_total, r.eps_correct + r.eps_secrecy);
    }

    #[test]
    fn more_decoy_errors_never_shrink_the_phase_error_bound(seed in any::<u64>(), extra in 1u64..500) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = random_constants(&mut rng, 10_000_000);
        let ch = channel(5.0, 0.01);
        let exp = expected_observables(&c, &ch);
        let obs = exp.rounded();
        let more = Observables::new(obs.n_sift_s, obs.n_sift_d, obs.n_sift_v, obs.n_err_dx + extra, obs.n_err_vx);
        let a = security_result(&c, &obs, &exp, 0).unwrap();
        let b = security_result(&c, &more, &exp, 0).unwrap();
        prop_assert!(b.nph_upper >= a.nph_upper);
        prop_assert!(b.n_pa >= a.n_pa);
    }
}

#[test]
fn informative_link_produces_matching_keys() {
    let (c, ch) = informative_scenario();
    let run = run_protocol(&c, &ch, &RunOptions { seed: 11, ..Default::default() }).unwrap();
    assert_eq!(run.outcome, Outcome::Key);
    assert_eq!(run.alice.final_key, run.bob.final_key);
    assert_eq!(run.alice.final_key.len() as u64, run.security.key_length);
    assert!(run.security.key_length > 1_000);
}

#[test]
fn longer_links_lose_key() {
    let (c, _) = informative_scenario();
    let mut last = i64::MAX;
    for loss in [0.0, 1.0, 3.0, 6.0] {
        let ch = ChannelModel::with_loss_db(loss, 1.0, 0.01, 1e-7).unwrap();
        let exp = expected_observables(&c, &ch);
        let obs = exp.rounded();
        let r = security_result(&c, &obs, &exp, n_ec(obs.n_sift, c.e_bit_assumed, 1.16).unwrap()).unwrap();
        assert!(r.n_fin < last, "{loss} dB: {} after {last}", r.n_fin);
        last = r.n_fin;
    }
}

#[test]
fn same_seed_same_transcript() {
    let (c, ch) = end_to_end_scenario();
    let opts = RunOptions { seed: 5, ..Default::default() };
    let a = run_protocol(&c, &ch, &opts).unwrap();
    let b = run_protocol(&c, &ch, &opts).unwrap();
    assert_eq!(a.transcript.to_bytes(), b.transcript.to_bytes());
    let other = run_protocol(&c, &ch, &RunOptions { seed: 6, ..Default::default() }).unwrap();
    assert_ne!(a.transcript.to_bytes(), other.transcript.to_bytes());
}

#[test]
fn reduced_suites_pass() {
    for (suite, trials) in [
        (Suite::KatoPlugback, 50),
        (Suite::KatoMc, 5_000),
        (Suite::Decoy, 500),
        (Suite::GroundTruth, 10),
        (Suite::Correctness, 2_000),
        (Suite::Fock, 50),
        (Suite::EndToEnd, 10),
        (Suite::Rounding, 20),
    ] {
        let (reports, _) = run_suite(suite, &SuiteOptions { seed: 3, trials: Some(trials) }).unwrap();
        for r in reports {
            assert!(r.pass, "{}: {r:?}", suite.name());
        }
    }
}

#[test]
fn transcripts_never_reveal_z_basis_bits() {
    use qkd_core::params::{PerBasis, PerIntensity};
    use qkd_core::protocol::{decode_frames, Message};
    use qkd_core::Basis;

    let c = ProtocolConstants::new(
        2,
        500,
        PerIntensity::new(0.6, 0.3, 0.1),
        PerIntensity::new(0.6, 0.2, 0.0),
        PerBasis::new(0.5, 0.5),
        PerBasis::new(0.5, 0.5),
        8,
        0.03,
        1e-3,
    )
    .unwrap();
    let ch = ChannelModel::with_transmittance(0.5, 1.0, 0.02, 1e-4).unwrap();
    let (mut bob_x, mut alice_x) = (0, 0);
    for seed in 0..1_000 {
        let run = run_protocol(&c, &ch, &RunOptions { seed, ..Default::default() }).unwrap();
        for m in decode_frames(&run.transcript.to_bytes()).unwrap() {
            match m {
                Message::BobBlockDisclosure(d) => {
                    for r in &d.rounds {
                        assert!(!(r.beta == Basis::Z && r.b.is_some()), "seed {seed}: Bob revealed a Z bit");
                        assert!(r.b.is_none() || r.clicked);
                        bob_x += r.b.is_some() as u64;
                    }
                }
                Message::AliceBlockDisclosure(d) => {
                    for r in &d.rounds {
                        assert!(!(r.alpha == Basis::Z && r.a.is_some()), "seed {seed}: Alice revealed a Z bit");
                        alice_x += r.a.is_some() as u64;
                    }
                }
                _ => {}
            }
        }
    }
    assert!(bob_x > 0 && alice_x > 0);
}
