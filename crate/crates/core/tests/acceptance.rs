//! Acceptance suite. Every criterion prints one PASS/FAIL line to stdout
//! (bypassing the test harness capture) and then asserts.

use std::io::Write;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::Instant;

use nalgebra::{UnitQuaternion, Vector3, Vector6};
use ndarray::{Array1, Array2};
use proptest::prelude::*;
use proptest::test_runner::{Config as ProptestConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use statrs::function::gamma::ln_gamma;

use tiltrotor_core::analysis::{rmse, welch_ttest};
use tiltrotor_core::bench;
use tiltrotor_core::checkpoint;
use tiltrotor_core::dynamics::{
    self, cog_estimate, thrust_wrench, DroneParams, RigidBodyState, RotorCommand, ALPHA_MAX, GRAVITY,
};
use tiltrotor_core::envs::{Env, EnvConfig, Observation, RandomizationRanges, ACT_DIM, OBS_DIM};
use tiltrotor_core::mixer::{self, blend, kl_divergence, DiagGaussian, MixerConfig};
use tiltrotor_core::nominal::allocation::allocate;
use tiltrotor_core::nominal::{solve_theta_des, EquationForm};
use tiltrotor_core::policy::{self, backward, forward, forward_batch, MlpParams};
use tiltrotor_core::scenario::{ControllerKind, Runner, ScenarioKind, ScenarioSpec};
use tiltrotor_core::stability::lyapunov_rate;
use tiltrotor_core::trainer::{
    gae, ppo_loss_grad, total_loss, IterationStats, Minibatch, RolloutBuffer, Trainer, TrainerConfig,
};

// ---------------------------------------------------------------- plumbing

fn serial() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(id: u32, name: &str, pass: bool, detail: &str) {
    let mut out = std::io::stdout().lock();
    let tag = if pass { "PASS" } else { "FAIL" };
    writeln!(out, "[{tag}] criterion {id:>2} {name}: {detail}").unwrap();
    out.flush().unwrap();
}

fn verdict(id: u32, name: &str, pass: bool, detail: String) {
    report(id, name, pass, &detail);
    assert!(pass, "criterion {id} ({name}) failed: {detail}");
}

struct TrainedPolicy {
    params: MlpParams,
    env_steps: u64,
    seconds: f64,
}

/// Desk preset, seed 0, shared by every criterion that needs a policy.
fn trained() -> &'static TrainedPolicy {
    static POLICY: OnceLock<TrainedPolicy> = OnceLock::new();
    POLICY.get_or_init(|| {
        let start = Instant::now();
        let (t, _) = train(TrainerConfig::desk(), RandomizationRanges::default());
        TrainedPolicy { params: t.params, env_steps: t.env_steps, seconds: start.elapsed().as_secs_f64() }
    })
}

fn train(cfg: TrainerConfig, ranges: RandomizationRanges) -> (Trainer, Vec<IterationStats>) {
    let mut t = Trainer::new(cfg, EnvConfig::default(), DroneParams::default(), ranges).unwrap();
    let log = t.train(|_| {}).unwrap();
    (t, log)
}

// ------------------------------------------------------- 1: mixer oracles

#[test]
fn criterion_01_mixer_oracle_equivalence() {
    let _g = serial();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let n = 1_000_000;
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let p = DiagGaussian {
            mean: std::array::from_fn(|_| rng.random_range(-1.0..1.0)),
            var: std::array::from_fn(|_| rng.random_range(0.1..2.0)),
        };
        let q = DiagGaussian {
            mean: std::array::from_fn(|_| rng.random_range(-1.0..1.0)),
            var: std::array::from_fn(|_| rng.random_range(0.1..2.0)),
        };
        // E_P[ln p(x) − ln q(x)], reduced over dimensions the same way
        let mut acc = 0.0;
        for _ in 0..n {
            for j in 0..ACT_DIM {
                let z: f64 = StandardNormal.sample(&mut rng);
                let x = p.mean[j] + p.var[j].sqrt() * z;
                let lp = -0.5 * z * z - 0.5 * p.var[j].ln();
                let lq = -0.5 * (x - q.mean[j]).powi(2) / q.var[j] - 0.5 * q.var[j].ln();
                acc += lp - lq;
            }
        }
        let mc = acc / (n * ACT_DIM) as f64;
        let exact = kl_divergence(&p, &q);
        worst = worst.max((mc - exact).abs() / exact);
    }

    let mut blend_err: f64 = 0.0;
    for _ in 0..10_000 {
        let w: f64 = rng.random_range(0.0..=1.0);
        let a0: [f64; ACT_DIM] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let a1: [f64; ACT_DIM] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let h = blend(w, &a0, &a1);
        for j in 0..ACT_DIM {
            blend_err = blend_err.max((h[j] - (w * a0[j] + (1.0 - w) * a1[j])).abs());
        }
    }
    let params = MlpParams::init(OBS_DIM, 32, ACT_DIM, &mut rng);
    let cfg = MixerConfig::default();
    for _ in 0..200 {
        let s = Observation {
            p: Vector3::from_fn(|_, _| rng.random_range(-0.5..0.5)),
            q: UnitQuaternion::from_euler_angles(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), 0.0),
            v: Vector3::from_fn(|_, _| rng.random_range(-0.2..0.2)),
            w: Vector3::from_fn(|_, _| rng.random_range(-0.2..0.2)),
            alpha: rng.random_range(0.0..ALPHA_MAX),
        };
        let a0: [f64; ACT_DIM] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let d = mixer::mix(&s, &params, &a0, &cfg, &mut rng).unwrap();
        for j in 0..ACT_DIM {
            blend_err = blend_err.max((d.a_hybrid[j] - (d.weight * a0[j] + (1.0 - d.weight) * d.a_rl[j])).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        1,
        "mixer oracle equivalence",
        worst < 0.02 && blend_err < 1e-12 && secs < 60.0,
        format!("worst KL vs 1e6-sample MC rel err {worst:.2e} (< 2e-2), blend err {blend_err:.1e} (< 1e-12), {secs:.1}s (< 60s)"),
    );
}

// --------------------------------------------- 2: quasi-decoupling solver

/// Lift and moment rows (moment at the current pitch 0) solved for the
/// thrust sums; returns the horizontal-force residual at pitch `th`.
fn force_residual(th: f64, alpha: f64, p: &DroneParams) -> f64 {
    let cog = cog_estimate(p, alpha).unwrap();
    let mg = p.mass * GRAVITY;
    let (sa, ca) = alpha.sin_cos();
    // [ca 1; -l0 l2] [f1 f2]^T = [mg cos th; mg x]
    let (b1, b2) = (mg * th.cos(), mg * cog.x);
    let det = ca * p.l2 + p.l0;
    let f1 = (b1 * p.l2 - b2) / det;
    f1 * sa - mg * th.sin()
}

#[test]
fn criterion_02_quasi_decoupling_solver() {
    let _g = serial();
    let start = Instant::now();
    let p = DroneParams::default();
    let mg = p.mass * GRAVITY;
    let mut worst_residual: f64 = 0.0;
    let mut worst_gap: f64 = 0.0;
    let mut missing = Vec::new();
    let grid: Vec<f64> = (1..31_416).map(|k| -std::f64::consts::FRAC_PI_2 + k as f64 * 1e-4).collect();
    for deg in 0..=110 {
        let alpha = (deg as f64).to_radians().min(ALPHA_MAX);
        let s = solve_theta_des(alpha, &p, 0.0, EquationForm::Corrected).unwrap();
        let cog = cog_estimate(&p, alpha).unwrap();
        let (sa, ca) = alpha.sin_cos();
        let r = [
            s.f1 * sa - mg * s.theta_des.sin(),
            s.f1 * ca + s.f2 - mg * s.theta_des.cos(),
            -s.f1 * p.l0 + s.f2 * p.l2 - mg * cog.x,
        ];
        worst_residual = worst_residual.max(r.iter().fold(0.0_f64, |m, v| m.max(v.abs())));

        let vals: Vec<f64> = grid.iter().map(|&th| force_residual(th, alpha, &p)).collect();
        let mut best: Option<f64> = None;
        for k in 0..vals.len() - 1 {
            let hit = vals[k] == 0.0 || vals[k].signum() != vals[k + 1].signum();
            if hit {
                let th = if vals[k].abs() <= vals[k + 1].abs() { grid[k] } else { grid[k + 1] };
                if best.is_none_or(|b| (th - s.theta_des).abs() < (b - s.theta_des).abs()) {
                    best = Some(th);
                }
            }
        }
        match best {
            Some(th) => worst_gap = worst_gap.max((th - s.theta_des).abs()),
            None => missing.push(deg),
        }
    }
    let level = solve_theta_des(0.0, &p, 0.0, EquationForm::Corrected).unwrap().theta_des;
    let secs = start.elapsed().as_secs_f64();
    verdict(
        2,
        "quasi-decoupling solver",
        worst_residual < 1e-9 && level == 0.0 && worst_gap < 2e-4 && missing.is_empty() && secs < 10.0,
        format!(
            "max residual {worst_residual:.1e} (< 1e-9), theta_des(0) = {level}, max gap to 1e-4 scan {worst_gap:.1e} rad (< 2e-4), scan roots missing at {missing:?}, {secs:.2}s (< 10s)"
        ),
    );
}

// ------------------------------------------------------- 3: dynamics

fn state_gap(a: &RigidBodyState, b: &RigidBodyState) -> f64 {
    [
        (a.position - b.position).amax(),
        (a.lin_vel - b.lin_vel).amax(),
        a.attitude.angle_to(&b.attitude),
        (a.ang_vel - b.ang_vel).amax(),
    ]
    .into_iter()
    .fold(0.0, f64::max)
}

#[test]
fn criterion_03_dynamics_oracles() {
    let _g = serial();
    let p = DroneParams::default();
    let mut s = RigidBodyState::default();
    let z0 = s.position.z;
    for _ in 0..100 {
        s = dynamics::step(&s, &RotorCommand::zero(), &p, 0.01, &Vector3::zeros()).unwrap();
    }
    let drop = z0 - s.position.z;
    let drop_err = (drop - 4.905).abs() / 4.905;

    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst_alloc: f64 = 0.0;
    let mut failures = 0;
    for _ in 0..10_000 {
        let alpha = rng.random_range(0.0..ALPHA_MAX);
        let t = Vector6::from_fn(|_, _| rng.random_range(0.0..p.thrust_max));
        let w = thrust_wrench(&p, alpha, &RotorCommand { thrusts: t });
        match allocate(w.force.z, w.force.x, &w.moment, alpha, &p) {
            Ok(cmd) => {
                let back = thrust_wrench(&p, alpha, &cmd);
                worst_alloc = worst_alloc.max((back.as_vector() - w.as_vector()).amax());
            }
            Err(_) => failures += 1,
        }
    }

    // one step of dt against two of dt/2; the gap shrinks as dt^order
    let mut orders = Vec::new();
    for _ in 0..20 {
        let alpha = rng.random_range(0.0..ALPHA_MAX);
        let s0 = RigidBodyState {
            position: Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)),
            attitude: UnitQuaternion::from_euler_angles(
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                rng.random_range(-3.0..3.0),
            ),
            lin_vel: Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)),
            ang_vel: Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)),
            tilt_alpha: alpha,
            tilt_target: alpha,
        };
        let cmd = RotorCommand { thrusts: std::array::from_fn(|_| rng.random_range(3.0..8.0)).into() };
        let gap = |dt: f64| {
            let one = dynamics::step(&s0, &cmd, &p, dt, &Vector3::zeros()).unwrap();
            let half = dynamics::step(&s0, &cmd, &p, dt / 2.0, &Vector3::zeros()).unwrap();
            let two = dynamics::step(&half, &cmd, &p, dt / 2.0, &Vector3::zeros()).unwrap();
            state_gap(&one, &two)
        };
        orders.push((gap(0.01) / gap(0.005)).log2());
    }
    let min_order = orders.iter().copied().fold(f64::INFINITY, f64::min);
    verdict(
        3,
        "dynamics oracles",
        drop_err < 0.005 && worst_alloc < 1e-6 && failures == 0 && min_order >= 1.9,
        format!(
            "free-fall drop {drop:.5} m (rel err {drop_err:.2e} < 5e-3), allocation round-trip max err {worst_alloc:.1e} (< 1e-6, {failures} failures / 1e4), min halving-dt order {min_order:.3} (>= 1.9)"
        ),
    );
}

// ---------------------------------------------- 4: policy/trainer numerics

fn jitter(p: &mut MlpParams, rng: &mut ChaCha8Rng, scale: f64) {
    for v in p.data.iter_mut() {
        *v += scale * rng.random_range(-1.0..1.0);
    }
}

fn random_obs(rng: &mut ChaCha8Rng, b: usize) -> Array2<f64> {
    Array2::from_shape_fn((b, OBS_DIM), |_| rng.random_range(-1.0..1.0))
}

/// Smallest |pre-activation| over both ReLU layers; central differences
/// are only an oracle where no perturbation can cross a kink.
fn kink_margin(p: &MlpParams, x: &Array2<f64>) -> f64 {
    let z1 = x.dot(&p.w1()) + p.b1();
    let h1 = z1.mapv(|v| v.max(0.0));
    let z2 = h1.dot(&p.w2()) + p.b2();
    z1.iter().chain(z2.iter()).fold(f64::INFINITY, |m, v| m.min(v.abs()))
}

fn rel_gap(a: f64, fd: f64) -> f64 {
    (a - fd).abs() / a.abs().max(fd.abs()).max(1e-3)
}

#[test]
fn criterion_04_policy_trainer_numerics() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let h = 1e-5;
    let mut worst_grad: f64 = 0.0;
    let mut redrawn = 0;
    for case in 0..100 {
        let (params, x) = loop {
            let mut params = MlpParams::init(OBS_DIM, 8, ACT_DIM, &mut rng);
            jitter(&mut params, &mut rng, 0.1);
            let x = random_obs(&mut rng, 3);
            if kink_margin(&params, &x) > 1e-3 {
                break (params, x);
            }
            redrawn += 1;
        };
        let analytic: Vec<f64>;
        let loss: Box<dyn Fn(&MlpParams) -> f64>;
        if case % 2 == 0 {
            // linear functional of every network output
            let um = Array2::from_shape_fn((3, ACT_DIM), |_| rng.random_range(-1.0..1.0));
            let uv = Array1::from_shape_fn(3, |_| rng.random_range(-1.0..1.0));
            let ul = Array1::from_shape_fn(ACT_DIM, |_| rng.random_range(-1.0..1.0));
            let c = forward_batch(&params, x.view()).unwrap();
            analytic = backward(&params, &c, um.view(), uv.view(), ul.view()).unwrap().data;
            let x = x.clone();
            loss = Box::new(move |p: &MlpParams| {
                let c = forward_batch(p, x.view()).unwrap();
                (&c.mean * &um).sum() + (&c.value * &uv).sum() + (&p.log_std() * &ul).sum()
            });
        } else {
            let out = forward_batch(&params, x.view()).unwrap();
            let std = params.std();
            let actions = Array2::from_shape_fn((3, ACT_DIM), |(i, j)| {
                out.mean[(i, j)] + std[j] * { let z: f64 = StandardNormal.sample(&mut rng); z }
            });
            let old_lp = Array1::from_shape_fn(3, |i| {
                let a: [f64; ACT_DIM] = std::array::from_fn(|j| actions[(i, j)]);
                let m: [f64; ACT_DIM] = std::array::from_fn(|j| out.mean[(i, j)]);
                policy::log_prob(&a, &m, std.as_slice().unwrap()) + 0.05 * rng.random_range(-1.0..1.0)
            });
            let adv = Array1::from_shape_fn(3, |_| rng.random_range(-1.0..1.0));
            let ret = Array1::from_shape_fn(3, |_| rng.random_range(-1.0..1.0));
            let cfg = TrainerConfig::desk();
            let mb = Minibatch {
                obs: x.view(),
                actions: actions.view(),
                old_log_probs: old_lp.view(),
                advantages: adv.view(),
                returns: ret.view(),
            };
            analytic = ppo_loss_grad(&params, &mb, &cfg).unwrap().1.data;
            let (x, actions) = (x.clone(), actions.clone());
            loss = Box::new(move |p: &MlpParams| {
                let mb = Minibatch {
                    obs: x.view(),
                    actions: actions.view(),
                    old_log_probs: old_lp.view(),
                    advantages: adv.view(),
                    returns: ret.view(),
                };
                total_loss(&ppo_loss_grad(p, &mb, &cfg).unwrap().0, &cfg)
            });
        }
        for (j, a) in analytic.iter().enumerate() {
            let mut plus = params.clone();
            plus.data[j] += h;
            let mut minus = params.clone();
            minus.data[j] -= h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            worst_grad = worst_grad.max(rel_gap(*a, fd));
        }
    }

    // GAE with lambda = 1 against discounted sums
    let (gamma, steps, envs) = (0.97, 10, 4);
    let mut worst_gae: f64 = 0.0;
    for _ in 0..100 {
        let mut b = RolloutBuffer::new(steps, envs);
        b.rewards = Array1::from_shape_fn(steps * envs, |_| rng.random_range(-1.0..1.0));
        b.values = Array1::from_shape_fn(steps * envs, |_| rng.random_range(-1.0..1.0));
        b.dones = Array1::from_shape_fn(steps * envs, |_| if rng.random_bool(0.2) { 1.0 } else { 0.0 });
        b.last_values = Array1::from_shape_fn(envs, |_| rng.random_range(-1.0..1.0));
        let (adv, _) = gae(&b, gamma, 1.0);
        for e in 0..envs {
            for t in 0..steps {
                let mut g = 0.0;
                let mut disc = 1.0;
                let mut ended = false;
                for k in t..steps {
                    g += disc * b.rewards[k * envs + e];
                    disc *= gamma;
                    if b.dones[k * envs + e] == 1.0 {
                        ended = true;
                        break;
                    }
                }
                if !ended {
                    g += disc * b.last_values[e];
                }
                worst_gae = worst_gae.max((adv[t * envs + e] - (g - b.values[t * envs + e])).abs());
            }
        }
    }

    let cfg = TrainerConfig::smoke();
    let (a, la) = train(cfg.clone(), RandomizationRanges::default());
    let (b, lb) = train(cfg, RandomizationRanges::default());
    let identical = checkpoint::encode(&a.params) == checkpoint::encode(&b.params)
        && format!("{la:?}") == format!("{lb:?}")
        && a.env_steps == b.env_steps;
    verdict(
        4,
        "policy/trainer numerics",
        worst_grad < 1e-4 && worst_gae < 1e-10 && identical,
        format!(
            "max grad vs central FD rel err {worst_grad:.1e} over 100 cases (< 1e-4, {redrawn} redrawn at a ReLU kink), GAE(lambda=1) vs MC max err {worst_gae:.1e} (< 1e-10), repeat training bit-identical: {identical}"
        ),
    );
}

// ------------------------------------------------------ 5: desk learning

/// Mean return and post-transient position RMSE of the policy mean on
/// nominal hover at zero tilt, from the training reset distribution.
fn evaluate_hover(params: &MlpParams, episodes: u64) -> (f64, f64, usize) {
    let (mut total, mut se, mut n, mut failures) = (0.0, 0.0, 0usize, 0);
    for k in 0..episodes {
        let mut env = Env::new(EnvConfig::default(), DroneParams::default(), 50_000 + k, 0).unwrap();
        env.set_task(DroneParams::default(), 0.0).unwrap();
        let mut obs = env.reset();
        loop {
            let a = forward(params, &obs.to_array()).unwrap().mean;
            let (next, info) = env.step(&a).unwrap();
            let o = info.final_obs.unwrap_or(next);
            // env.steps is reset on episode end, so count from the info
            let step = if info.done { info.episode.unwrap().1 } else { env.steps };
            if step as f64 * env.cfg.dt > 2.0 {
                se += o.p.norm_squared();
                n += 1;
            }
            if info.done {
                total += info.episode.unwrap().0;
                failures += info.terminated as usize;
                break;
            }
            obs = next;
        }
    }
    (total / episodes as f64, (se / n.max(1) as f64).sqrt(), failures)
}

#[test]
fn criterion_05_desk_scale_learning() {
    let _g = serial();
    let t = trained();
    let (reward, pos_rmse, failures) = evaluate_hover(&t.params, 100);
    let minutes = t.seconds / 60.0;
    verdict(
        5,
        "desk-scale learning",
        reward >= 1400.0 && pos_rmse < 0.15 && t.env_steps <= 5_000_000 && minutes <= 30.0,
        format!(
            "alpha=0 mean episode reward {reward:.1} (>= 1400 of 2000), position RMSE after 2 s over 100 episodes {pos_rmse:.3} m (< 0.15), {failures} failures, {} env steps in {minutes:.1} min on {} thread(s)",
            t.env_steps,
            rayon::current_num_threads()
        ),
    );
}

// --------------------------------------------------- 6: period trend

/// Budget of each sweep run; the desk preset otherwise.
const SWEEP_STEPS: u64 = 2_000_000;

fn final_reward(log: &[IterationStats]) -> f64 {
    let tail = &log[log.len() - (log.len() / 10).max(1)..];
    let xs: Vec<f64> = tail.iter().map(|s| s.mean_episode_reward).filter(|r| r.is_finite()).collect();
    xs.iter().sum::<f64>() / xs.len() as f64
}

#[test]
fn criterion_06_randomization_period_trend() {
    let _g = serial();
    let mut by_period = Vec::new();
    for period in [250u64, 1000] {
        let rewards: Vec<f64> = (1..=3)
            .map(|seed| {
                let cfg = TrainerConfig { seed, total_steps: SWEEP_STEPS, ..TrainerConfig::desk() };
                let ranges = RandomizationRanges { period_steps: period, ..RandomizationRanges::default() };
                final_reward(&train(cfg, ranges).1)
            })
            .collect();
        by_period.push(rewards);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (short, long) = (&by_period[0], &by_period[1]);
    let p = welch_ttest(long, short).map(|r| r.p_greater()).unwrap_or(f64::NAN);
    verdict(
        6,
        "randomization-period trend",
        mean(long) > mean(short) && p < 0.1,
        format!(
            "final reward period 1000 {:.1} {long:.1?} vs period 250 {:.1} {short:.1?}, one-sided Welch p {p:.4} (< 0.1), {SWEEP_STEPS} steps per run",
            mean(long),
            mean(short)
        ),
    );
}

// ------------------------------------------------------ 7: Lyapunov

#[test]
fn criterion_07_lyapunov_monitor() {
    let _g = serial();
    let d = 0.5 / 3f64.sqrt();
    let spec = ScenarioSpec {
        init_offset: [d, d, d],
        init_jitter: 0.0,
        ..ScenarioSpec::new(ScenarioKind::HoverRegular, ControllerKind::Nominal)
    };
    let r = Runner::new(None).run(&spec, 0).unwrap();
    let fraction = r.summary.stability.map(|s| s.fraction_negative).unwrap_or(0.0);

    let mut runner = TestRunner::new(ProptestConfig { cases: 10_000, failure_persistence: None, ..ProptestConfig::default() });
    let strategy = (prop::array::uniform3(1e-3f64..100.0), prop::array::uniform3(-10.0f64..10.0));
    let identity = runner.run(&strategy, |(k, p)| {
        let p = Vector3::from(p);
        prop_assume!(p.norm() > 1e-3);
        let kp = Vector3::new(k[0] * p.x, k[1] * p.y, k[2] * p.z);
        let rate = lyapunov_rate(&p, &(-kp));
        let expected = -p.dot(&kp) / p.norm();
        prop_assert!(rate < 0.0);
        prop_assert!((rate - expected).abs() <= 1e-12 * (1.0 + expected.abs()));
        Ok(())
    });
    verdict(
        7,
        "Lyapunov monitor",
        fraction >= 0.99 && identity.is_ok() && !r.summary.terminated,
        format!(
            "nominal hover from 0.5 m: fraction of post-2 s samples with vdot < 1e-3 = {fraction:.4} (>= 0.99); vdot(p,-Kp) identity over 1e4 samples: {}",
            match &identity {
                Ok(()) => "holds".to_string(),
                Err(e) => format!("violated ({e})"),
            }
        ),
    );
}

// -------------------------------------------------- 8: wall disturbance

#[test]
fn criterion_08_hybrid_improves_under_disturbance() {
    let _g = serial();
    let t = trained();
    let runner = Runner::new(Some(&t.params));
    let rmses = |c: ControllerKind| -> Vec<f64> {
        let spec = ScenarioSpec::new(ScenarioKind::HoverNearWall, c);
        (0..20).map(|seed| runner.run(&spec, seed).unwrap().summary.position_rmse).collect()
    };
    let retro = rmses(ControllerKind::Retro);
    let nominal = rmses(ControllerKind::Nominal);
    let ppo = rmses(ControllerKind::Ppo);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let test = welch_ttest(&retro, &nominal);
    let p = test.as_ref().map(|r| r.p_value).unwrap_or(f64::NAN);
    verdict(
        8,
        "hybrid improves under disturbance",
        mean(&retro) <= mean(&nominal) && p < 0.05,
        format!(
            "near-wall hover position RMSE over 20 episodes: retro {:.4} m, nominal {:.4} m, ppo {:.4} m; Welch p (retro vs nominal) {p:.4} (< 0.05)",
            mean(&retro),
            mean(&nominal),
            mean(&ppo)
        ),
    );
}

// ------------------------------------------------- 9: mixer behaviour

#[test]
fn criterion_09_mixer_behavior() {
    let _g = serial();
    let t = trained();
    let runner = Runner::new(Some(&t.params));
    let mut steps = 0usize;
    let mut out_of_range = 0usize;
    let mut hover_weight = f64::NAN;
    for kind in ScenarioKind::ALL {
        for spec in [ScenarioSpec::new(kind, ControllerKind::Retro), ScenarioSpec::new(kind, ControllerKind::Retro).hold_30hz()] {
            let r = runner.run(&spec, 9).unwrap();
            for row in &r.rows {
                steps += 1;
                if !row.weight.is_some_and(|w| (0.0..=1.0).contains(&w)) {
                    out_of_range += 1;
                }
            }
            if kind == ScenarioKind::HoverRegular && spec.control_rate_hz == 100.0 {
                hover_weight = r.summary.mean_weight.unwrap();
            }
        }
    }

    // five times the reset envelope the policy was trained from
    let env = EnvConfig::default();
    let tilt = 5.0 * env.init_tilt;
    let ood = Observation {
        p: Vector3::repeat(5.0 * env.init_pos),
        q: UnitQuaternion::from_euler_angles(tilt, tilt, 0.0),
        v: Vector3::repeat(5.0 * env.init_lin_vel),
        w: Vector3::repeat(5.0 * env.init_ang_vel),
        alpha: 5.0 * ALPHA_MAX,
    };
    let cfg = MixerConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let ood_weight = (0..100)
        .map(|_| mixer::mix(&ood, &t.params, &[0.0; ACT_DIM], &cfg, &mut rng).unwrap().weight)
        .sum::<f64>()
        / 100.0;
    verdict(
        9,
        "mixer behavior",
        out_of_range == 0 && ood_weight > hover_weight,
        format!(
            "{out_of_range} of {steps} logged retro steps outside [0,1] across all scenarios at 100 Hz and 30 Hz; OOD mean weight {ood_weight:.4} vs in-distribution hover mean weight {hover_weight:.4}"
        ),
    );
}

// ---------------------------------------------------- 10: throughput

#[test]
fn criterion_10_throughput() {
    let _g = serial();
    let r = bench::scaling(256, 400, 0).unwrap();
    let best = r.best().unwrap();
    let ladder: Vec<String> =
        r.results.iter().map(|b| format!("{}t {:.0}/s", b.threads, b.steps_per_sec)).collect();
    verdict(
        10,
        "throughput",
        best.steps_per_sec >= 100_000.0,
        format!(
            "256 envs + nominal controller: best {:.0} env-steps/s (>= 1e5) on {} available thread(s); scaling {}",
            best.steps_per_sec,
            r.available_threads,
            ladder.join(", ")
        ),
    );
}

// ---------------------------------------------------- 11: statistics

/// Two-sided Student-t tail by composite Simpson quadrature of the density.
fn t_tail_quadrature(t: f64, dof: f64) -> f64 {
    let ln_c = ln_gamma(0.5 * (dof + 1.0)) - ln_gamma(0.5 * dof) - 0.5 * (dof * std::f64::consts::PI).ln();
    let f = |x: f64| (ln_c - 0.5 * (dof + 1.0) * (1.0 + x * x / dof).ln()).exp();
    let b = t.abs();
    let n = 200_000;
    let h = b / n as f64;
    let mut s = f(0.0) + f(b);
    for k in 1..n {
        s += f(k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
    }
    (1.0 - 2.0 * s * h / 3.0).clamp(0.0, 1.0)
}

#[test]
fn criterion_11_statistics() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(1111);
    let mut worst_p: f64 = 0.0;
    for _ in 0..50 {
        let na = rng.random_range(3..30);
        let nb = rng.random_range(3..30);
        let shift = rng.random_range(-1.0..1.0);
        let scale = rng.random_range(0.5..3.0);
        let a: Vec<f64> = (0..na).map(|_| StandardNormal.sample(&mut rng)).collect();
        let b: Vec<f64> =
            (0..nb).map(|_| { let z: f64 = StandardNormal.sample(&mut rng); shift + scale * z }).collect();
        let r = welch_ttest(&a, &b).unwrap();
        worst_p = worst_p.max((r.p_value - t_tail_quadrature(r.t_statistic, r.degrees_of_freedom)).abs());
    }
    let mut worst_rmse: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.random_range(1..500);
        let xs: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
        let mut acc = 0.0;
        for x in &xs {
            acc += x * x;
        }
        let oracle = (acc / n as f64).sqrt();
        worst_rmse = worst_rmse.max((rmse(&xs).unwrap() - oracle).abs());
    }
    verdict(
        11,
        "statistics",
        worst_p < 1e-6 && worst_rmse < 1e-12,
        format!("Welch p vs t-density quadrature max err {worst_p:.1e} over 50 pairs (< 1e-6), rmse vs loop max err {worst_rmse:.1e} (< 1e-12)"),
    );
}
