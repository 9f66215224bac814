//! Parallelism planning, pipeline scheduling, batch balancing and the fused
//! modulation kernel on a toy cluster.

use mugv::infra::{
    balance_batches, composed_modulate, fused_modulate, optimal_makespan, plan_parallelism, round_robin,
    simulate_pipeline, ClusterSpec, ModelCost,
};

fn main() -> mugv::Result<()> {
    let cluster = ClusterSpec {
        world_size: 16,
        device_flops: 4e14,
        intra_bandwidth: 3e11,
        inter_bandwidth: 2.5e10,
        devices_per_node: 8,
    };
    let model = ModelCost::transformer(2_000_000_000, 2048, 32, 1 << 20);
    println!("{:>3} {:>3} {:>3} {:>10} {:>6} {:>7}", "dp", "tp", "pp", "step s", "comm", "bubble");
    for p in plan_parallelism(&model, &cluster, 8)?.iter().take(6) {
        println!(
            "{:>3} {:>3} {:>3} {:>10.3} {:>5.1}% {:>6.1}%",
            p.dp,
            p.tp,
            p.pp,
            p.step_time,
            100.0 * p.comm_fraction,
            100.0 * p.bubble_fraction
        );
    }

    let run = simulate_pipeline(&[1.0, 1.0, 1.5, 1.0], 6)?;
    println!("\npipeline with a slow third stage: makespan {:.1}, bubble {:.3}", run.makespan, run.bubble_fraction);

    // sequence lengths of a mixed-resolution batch
    let costs = [4096.0, 1024.0, 2304.0, 256.0, 4096.0, 576.0, 1600.0, 3136.0, 900.0, 2500.0];
    let lpt = balance_batches(&costs, 4)?;
    let rr = round_robin(&costs, 4)?;
    println!(
        "\nbalancing {} samples over 4 ranks: greedy max load {}, round robin {}, optimum {}",
        costs.len(),
        lpt.max_load(),
        rr.max_load(),
        optimal_makespan(&costs, 4)?
    );

    let (n, c) = (1 << 16, 64);
    let x: Vec<f32> = (0..n).map(|i| (i % 97) as f32 * 0.01).collect();
    let r: Vec<f32> = (0..n).map(|i| (i % 13) as f32 * -0.1).collect();
    let vec_c = |k: f32| -> Vec<f32> { (0..c).map(|i| i as f32 * k).collect() };
    let mut out = vec![0.0; n];
    let visits = fused_modulate(&x, &vec_c(0.01), &vec_c(0.002), &vec_c(-0.03), &r, &mut out)?;
    let same = out == composed_modulate(&x, &vec_c(0.01), &vec_c(0.002), &vec_c(-0.03), &r);
    println!("\nfused kernel: {visits:?}, matches composed ops: {same}");
    Ok(())
}
