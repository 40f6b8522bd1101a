use std::sync::Arc;

use esds_core::envstats::TerrainStats;
use esds_core::reward_dsl::{CompiledReward, RewardProgram};
use esds_core::sim::{
    mechanical_energy, reset, run_episode, step, Command, ConstantPolicy, EnvConfig, ResetOptions, WalkerConfig,
    WalkerEnv, JOINTS,
};
use esds_core::terrain::{generate_terrain, Rect, TerrainKind, TerrainMap, TerrainParams};

fn flat_map() -> Arc<TerrainMap> {
    let params = TerrainParams { bump_amp_range: (0.0, 0.0), ..TerrainParams::default() };
    Arc::new(generate_terrain(TerrainKind::Simple, &params, 0).unwrap())
}

/// 8 m × 4 m flat strip with a 1 m gap across it starting at x = 1.1.
fn gap_strip() -> Arc<TerrainMap> {
    let params = TerrainParams {
        extent: (8.0, 4.0),
        spawn_zone: Rect::new(0.9, -0.1, 1.1, 0.1),
        ..TerrainParams::default()
    };
    let gap = Rect::new(1.1, -2.0, 2.1, 2.0);
    let (nx, ny) = (160, 80);
    let mut cells = vec![0.0; nx * ny];
    let mut mask = vec![false; nx * ny];
    for iy in 0..ny {
        for ix in 0..nx {
            let x = -4.0 + 0.05 * (ix as f64 + 0.5);
            if gap.contains(x, 0.0) {
                cells[iy * nx + ix] = params.gap_depth;
                mask[iy * nx + ix] = true;
            }
        }
    }
    Arc::new(TerrainMap::from_cells(TerrainKind::Gaps, params, 0, cells, mask, vec![gap]).unwrap())
}

fn tracking() -> RewardProgram {
    RewardProgram::parse("term v weight 1 = 1 - abs(vx - vx_cmd);").unwrap()
}

#[test]
fn zero_torque_stance_settles_without_torso_contact() {
    let map = flat_map();
    let cfg = EnvConfig::default();
    let traj = run_episode(
        &mut ConstantPolicy(vec![0.0; JOINTS]),
        &tracking(),
        map,
        Command::default(),
        400,
        1,
        &cfg,
        &TerrainStats::flat(TerrainKind::Simple),
    )
    .unwrap();
    assert_eq!(traj.len(), 400);
    assert!(!traj.terminated);
    assert!(traj.steps.iter().all(|s| !s.torso_contact));
    let last = traj.steps.last().unwrap();
    assert!(last.base_pos[2] > 0.4 && last.base_pos[2] < cfg.walker.nominal_height() + 0.05, "z = {}", last.base_pos[2]);
    assert!(last.lin_vel[0].abs() < 0.05 && last.lin_vel[1].abs() < 0.05);
    assert!(last.foot_contact.iter().all(|&c| c));
}

#[test]
fn free_fall_velocity_change_matches_gravity() {
    let map = flat_map();
    let cfg = WalkerConfig::default();
    let mut s = reset(&map, &cfg, &ResetOptions { random_position: false, jitter: 0.0 }, 0);
    s.base_pos[2] += 5.0;
    let v0 = s.base_lin_vel[2];
    // 5 control steps = 0.1 s.
    for _ in 0..5 {
        let (next, report) = step(&s, &[0.0; JOINTS], &map, &cfg).unwrap();
        assert!(!report.torso_contact && report.foot_contact.iter().all(|&c| !c));
        s = next;
    }
    let dv = s.base_lin_vel[2] - v0;
    let expected = -cfg.gravity * 5.0 * cfg.control_dt();
    assert!((dv - expected).abs() <= 0.01 * expected.abs(), "Δvz = {dv}, expected {expected}");
}

#[test]
fn airborne_energy_does_not_drift_without_dissipation() {
    let map = flat_map();
    let cfg = WalkerConfig { joint_damping: 0.0, attitude_kp: 0.0, attitude_kd: 0.0, yaw_damping: 0.0, ..WalkerConfig::default() };
    let mut s = reset(&map, &cfg, &ResetOptions { random_position: false, jitter: 0.0 }, 0);
    s.base_pos[2] = 200.0;
    s.base_lin_vel[2] = 9.81;
    for (j, qd) in s.qd.iter_mut().enumerate() {
        *qd = 0.3 * if j % 2 == 0 { 1.0 } else { -1.0 };
    }
    s.roll_rate = 0.2;
    let n = 100;
    let mut energy = Vec::with_capacity(n);
    for _ in 0..n {
        s = step(&s, &[0.0; JOINTS], &map, &cfg).unwrap().0;
        energy.push(mechanical_energy(&s, &cfg));
    }
    // Least-squares slope of energy against step index.
    let xm = (n as f64 - 1.0) / 2.0;
    let em = energy.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, e) in energy.iter().enumerate() {
        sxy += (i as f64 - xm) * (e - em);
        sxx += (i as f64 - xm).powi(2);
    }
    let drift = sxy / sxx * n as f64;
    assert!(drift.abs() < 1e-2, "energy drift {drift} J over {n} steps");
}

#[test]
fn walking_into_a_gap_ends_in_a_fall() {
    let map = gap_strip();
    let cfg = Arc::new(EnvConfig::default());
    let reward = Arc::new(CompiledReward::new(&tracking(), Arc::new(cfg.feature_schema())).unwrap());
    let mut env = WalkerEnv::new(cfg.clone(), map.clone(), reward, &TerrainStats::flat(TerrainKind::Gaps), 0);
    // Launched forward off the ground so the anchored feet do not hold it back.
    let mut s = env.state().clone();
    let z0 = s.base_pos[2];
    s.base_pos[2] += 0.2;
    s.base_lin_vel[0] = 2.0;
    env.set_state(s);
    let mut min_z = z0;
    let mut ended = false;
    for _ in 0..300 {
        let out = env.step(&[0.0; JOINTS]);
        min_z = min_z.min(out.record.base_pos[2]);
        if out.terminated {
            ended = true;
            break;
        }
    }
    assert!(ended, "walker never fell");
    assert!(z0 - min_z > 0.5, "drop {}", z0 - min_z);
}

#[test]
fn episodes_are_deterministic_per_seed() {
    let map = Arc::new(generate_terrain(TerrainKind::Obstacles, &TerrainParams::default(), 5).unwrap());
    let cfg = EnvConfig::default();
    let stats = TerrainStats::flat(TerrainKind::Obstacles);
    let run = |seed| {
        let policy = vec![0.3, -0.2, 0.1, -0.3, 0.2, -0.1];
        run_episode(&mut ConstantPolicy(policy), &tracking(), map.clone(), Command::new(0.5, 0.0, 0.1), 150, seed, &cfg, &stats)
            .unwrap()
    };
    assert_eq!(run(3), run(3));
    assert_ne!(run(3).steps[10].base_pos, run(4).steps[10].base_pos);
}

#[test]
fn blind_and_perceptive_observations_share_width() {
    let map = flat_map();
    let stats = TerrainStats::flat(TerrainKind::Simple);
    for mode in [esds_core::sensors::ObservationMode::Perceptive, esds_core::sensors::ObservationMode::Blind] {
        let cfg = Arc::new(EnvConfig { mode, ..EnvConfig::default() });
        let reward = Arc::new(CompiledReward::new(&tracking(), Arc::new(cfg.feature_schema())).unwrap());
        let mut env = WalkerEnv::new(cfg.clone(), map.clone(), reward, &stats, 0);
        let obs = env.reset_with(Command::new(0.5, 0.0, 0.0));
        assert_eq!(obs.len(), cfg.observation_len());
        assert!(obs.iter().all(|x| x.is_finite()));
    }
}
