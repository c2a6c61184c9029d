#include "retrolite/noise.hpp"

namespace retrolite {

NoiseKind parse_noise_kind(const std::string& s) {
    if (s == "none") return NoiseKind::None;
    if (s == "gaussian") return NoiseKind::Gaussian;
    if (s == "uniform") return NoiseKind::Uniform;
    fail("unknown noise kind: ", s);
}

NoisePlacement parse_noise_placement(const std::string& s) {
    if (s == "sequence") return NoisePlacement::Sequence;
    if (s == "neighbors") return NoisePlacement::Neighbors;
    if (s == "both") return NoisePlacement::Both;
    fail("unknown noise placement: ", s);
}

std::string to_string(NoiseKind k) {
    switch (k) {
        case NoiseKind::None: return "none";
        case NoiseKind::Gaussian: return "gaussian";
        case NoiseKind::Uniform: return "uniform";
    }
    return "?";
}

std::string to_string(NoisePlacement p) {
    switch (p) {
        case NoisePlacement::Sequence: return "sequence";
        case NoisePlacement::Neighbors: return "neighbors";
        case NoisePlacement::Both: return "both";
    }
    return "?";
}

std::string regularizer_label(const RegularizerSpec& spec) {
    switch (spec.kind) {
        case NoiseKind::None: return "none";
        case NoiseKind::Gaussian: return concat("gaussian(lambda_t=", spec.lambda_t, ")");
        case NoiseKind::Uniform: return concat("uniform(alpha=", spec.alpha, ")");
    }
    return "?";
}

}  // namespace retrolite
