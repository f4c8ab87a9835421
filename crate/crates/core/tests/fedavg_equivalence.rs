//! Full-precision equivalence oracle: at `alpha = V` the round engine must
//! reproduce an independently written unquantized federated-averaging
//! implementation bit for bit, round after round, under shared seeds.
//!
//! The reference below re-implements forward, backward, the SGD step, and
//! the weighted aggregation from scratch on plain nested vectors. Sums
//! follow the engine's documented conventions (ascending index order;
//! dataset-wide reductions chunked at `REDUCE_CHUNK`), which pin the exact
//! floating-point evaluation order.

mod common;

use bitfed_core::action::Action;
use bitfed_core::datasets::{partition, synthetic, PartitionMode};
use bitfed_core::federation::{EnvSetup, FederationEnv, RlEnvironment};
use bitfed_core::wireless::{dbm_to_watts, ChannelModel, DeviceProfile, NetworkConfig};
use common::{net_from_model, ref_global_loss, ref_round};

#[test]
fn full_precision_pipeline_matches_reference_fedavg_bit_exactly() {
    let ds = synthetic(3, 6, 300, 77).unwrap();
    let m = 3usize;
    let part = partition(&ds, m, PartitionMode::Iid { samples_per_device: None }, 5).unwrap();
    let profiles = vec![
        DeviceProfile {
            rho: 1.0,
            cpu_hz: 3.3e9,
            bits_per_cycle: 64.0,
            distance_m: 50.0,
            tx_power_w: 0.5,
        };
        m
    ];
    let net_cfg = NetworkConfig {
        max_selected: 3,
        delay_budget_s: 1e6,
        tx_size_params: 45,
        mult_ops: 45,
        full_bitwidth: 32,
    };
    let lambda = 0.3;
    let mut env = FederationEnv::new(EnvSetup {
        dataset: ds.clone(),
        partition: part.clone(),
        profiles,
        channel_model: ChannelModel::default(),
        bandwidth_hz: 1e6,
        noise_w: dbm_to_watts(-174.0),
        net: net_cfg,
        layer_dims: vec![6, 5, 3],
        full_bitwidth: 32,
        lambda,
        batch_size: None,
        seed: 2024,
    })
    .unwrap();

    let one_hots: Vec<Vec<f64>> = (0..ds.len()).map(|n| ds.one_hot(n)).collect();
    let device_samples: Vec<Vec<usize>> =
        (0..m).map(|d| part.samples_of(d).to_vec()).collect();
    let mut reference = net_from_model(env.model());

    // Ten rounds over varying selections, all at full precision.
    let selections: Vec<Vec<bool>> = (0..10)
        .map(|r| match r % 3 {
            0 => vec![true, true, false],
            1 => vec![false, true, true],
            _ => vec![true, true, true],
        })
        .collect();

    for (round, selected) in selections.iter().enumerate() {
        env.begin_round().unwrap();
        let res = env.step(&Action::new(selected.clone(), 32)).unwrap();
        reference = ref_round(&reference, &ds, &one_hots, &device_samples, selected, lambda);

        for (k, layer) in res.global_model.layers.iter().enumerate() {
            for r in 0..layer.rows() {
                for c in 0..layer.cols() {
                    assert_eq!(
                        layer.get(r, c).to_bits(),
                        reference.layers[k][r][c].to_bits(),
                        "round {round}, layer {k}, weight ({r},{c}) diverged"
                    );
                }
            }
        }
        let ref_loss = ref_global_loss(&reference, &ds, &one_hots);
        assert_eq!(
            res.loss.to_bits(),
            ref_loss.to_bits(),
            "round {round}: loss diverged ({} vs {ref_loss})",
            res.loss
        );
    }
}
