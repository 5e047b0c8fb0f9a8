//! Per-device energy accounting.
//!
//! Computation energy is a per-iteration charge; transmission energy comes
//! from the Shannon uplink rate: a device sending `32 d` bits at power
//! `P_t` over a channel with rate `R = B log2(1 + P_t / (dist * B * N0))`
//! spends `P_t * 32 d / R` joules per upload. Total energy converts to a
//! carbon figure through a configurable kg-CO2-eq per megajoule factor.
//!
//! Transmission cost depends only on the parameter count, the channel, and
//! the upload count, so methods that upload one parameter vector per round
//! accrue identical transmission energy per round; any gap at a target
//! accuracy is exactly the round-count gap. Downloads are not charged; the
//! ledger is device-centric.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uplink channel parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelConfig {
    /// Transmit power in watts.
    pub transmit_power_w: f64,
    /// Bandwidth in hertz.
    pub bandwidth_hz: f64,
    /// Noise spectral density in watts/hertz.
    pub noise_density_w_per_hz: f64,
    /// Device-to-server distance in meters.
    pub distance_m: f64,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self {
            transmit_power_w: 0.1,
            bandwidth_hz: 2e6,
            noise_density_w_per_hz: 1e-9,
            distance_m: 50.0,
        }
    }
}

impl ChannelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("transmit_power_w", self.transmit_power_w),
            ("bandwidth_hz", self.bandwidth_hz),
            ("noise_density_w_per_hz", self.noise_density_w_per_hz),
            ("distance_m", self.distance_m),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be finite and > 0")));
            }
        }
        Ok(())
    }
}

/// Maximum achievable uplink rate in bits/second:
/// `B log2(1 + P_t / (dist * B * N0))`.
pub fn shannon_rate(ch: &ChannelConfig) -> f64 {
    let snr = ch.transmit_power_w
        / (ch.distance_m * ch.bandwidth_hz * ch.noise_density_w_per_hz);
    ch.bandwidth_hz * (1.0 + snr).log2()
}

/// Bits on the wire for one model upload (32-bit payload encoding).
pub const BITS_PER_PARAMETER: u64 = 32;

/// Seconds needed to upload `param_count` parameters over `ch`.
pub fn transmission_seconds(param_count: usize, ch: &ChannelConfig) -> f64 {
    (BITS_PER_PARAMETER * param_count as u64) as f64 / shannon_rate(ch)
}

/// Cumulative per-device energy ledger. All fields are nondecreasing.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyLedger {
    /// Computation energy, joules.
    pub e_comp_j: f64,
    /// Transmission energy, joules.
    pub e_tx_j: f64,
    /// Bits sent to the server.
    pub bits_sent: u64,
    /// Uploads performed (one per participated round).
    pub rounds: u64,
}

impl EnergyLedger {
    /// Charge `iterations` local iterations at `e_per_iter` joules each.
    pub fn charge_computation(&mut self, iterations: u64, e_per_iter: f64) {
        self.e_comp_j += iterations as f64 * e_per_iter;
    }

    /// Charge one model upload of `param_count` parameters and return the
    /// modeled transmission time in seconds.
    pub fn charge_transmission(&mut self, param_count: usize, ch: &ChannelConfig) -> f64 {
        let bits = BITS_PER_PARAMETER * param_count as u64;
        let seconds = bits as f64 / shannon_rate(ch);
        self.e_tx_j += ch.transmit_power_w * seconds;
        self.bits_sent += bits;
        self.rounds += 1;
        seconds
    }

    pub fn total_joules(&self) -> f64 {
        self.e_comp_j + self.e_tx_j
    }

    /// Total energy in kg-CO2-eq given a kg-per-megajoule factor.
    pub fn carbon_kg(&self, kg_per_megajoule: f64) -> f64 {
        self.total_joules() / 1e6 * kg_per_megajoule
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shannon_rate_reference_point() {
        // P_t = 0.1 W, B = 2 MHz, N0 = 1e-9 W/Hz, dist = 50 m: the SNR term
        // is 0.1 / (50 * 2e6 * 1e-9) = 1, so R = 2e6 * log2(2) = 2e6 bit/s.
        let ch = ChannelConfig::default();
        let r = shannon_rate(&ch);
        assert!((r - 2.0e6).abs() / 2.0e6 < 1e-12);
    }

    #[test]
    fn shannon_rate_vanishes_with_power() {
        let ch = ChannelConfig {
            transmit_power_w: 1e-12,
            ..ChannelConfig::default()
        };
        let r = shannon_rate(&ch);
        assert!(r > 0.0);
        assert!(r < 1e-3);
    }

    #[test]
    fn wider_band_raises_rate_despite_smaller_log() {
        // With SNR >> 1 doubling B halves the SNR term but doubles the
        // prefactor; the rate must still increase.
        let ch = ChannelConfig {
            transmit_power_w: 10.0,
            ..ChannelConfig::default()
        };
        let wide = ChannelConfig {
            bandwidth_hz: ch.bandwidth_hz * 2.0,
            ..ch
        };
        assert!(shannon_rate(&wide) > shannon_rate(&ch));
    }

    #[test]
    fn computation_charge_examples() {
        let mut ledger = EnergyLedger::default();
        ledger.charge_computation(10, 0.5);
        assert_eq!(ledger.e_comp_j, 5.0);
        ledger.charge_computation(0, 123.0);
        assert_eq!(ledger.e_comp_j, 5.0);
    }

    #[test]
    fn transmission_chained_example() {
        // d = 7850 over the reference channel: 251200 bits, 0.1256 s,
        // 0.01256 J.
        let ch = ChannelConfig::default();
        let mut ledger = EnergyLedger::default();
        let secs = ledger.charge_transmission(7850, &ch);
        assert_eq!(ledger.bits_sent, 251_200);
        assert!((secs - 0.1256).abs() < 1e-12);
        assert!((ledger.e_tx_j - 0.01256).abs() < 1e-12);
        assert_eq!(ledger.rounds, 1);
    }

    #[test]
    fn transmission_additivity() {
        let ch = ChannelConfig::default();
        let mut once = EnergyLedger::default();
        once.charge_transmission(1000, &ch);
        let mut twice = EnergyLedger::default();
        twice.charge_transmission(1000, &ch);
        twice.charge_transmission(1000, &ch);
        assert_eq!(twice.bits_sent, 2 * once.bits_sent);
        assert_eq!(twice.e_tx_j, 2.0 * once.e_tx_j);
    }

    #[test]
    fn carbon_examples() {
        let ledger = EnergyLedger {
            e_comp_j: 1.5e6,
            e_tx_j: 0.5e6,
            bits_sent: 0,
            rounds: 0,
        };
        assert_eq!(ledger.carbon_kg(0.0), 0.0);
        assert!((ledger.carbon_kg(0.07) - 0.14).abs() < 1e-12);
        // Linear in total energy.
        assert!((ledger.carbon_kg(0.14) - 2.0 * ledger.carbon_kg(0.07)).abs() < 1e-15);
    }

    proptest::proptest! {
        #[test]
        fn ledger_monotone_under_any_sequence(
            ops in proptest::collection::vec((0u8..2, 1usize..5000, 0.0..2.0f64), 1..32)
        ) {
            let ch = ChannelConfig::default();
            let mut ledger = EnergyLedger::default();
            let mut prev = ledger;
            for (kind, count, energy) in ops {
                if kind == 0 {
                    ledger.charge_computation(count as u64, energy);
                } else {
                    ledger.charge_transmission(count, &ch);
                }
                proptest::prop_assert!(ledger.e_comp_j >= prev.e_comp_j);
                proptest::prop_assert!(ledger.e_tx_j >= prev.e_tx_j);
                proptest::prop_assert!(ledger.bits_sent >= prev.bits_sent);
                proptest::prop_assert!(ledger.rounds >= prev.rounds);
                prev = ledger;
            }
        }
    }
}
