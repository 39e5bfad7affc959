#pragma once

#include "regfactor/model.hpp"

namespace regfactor {

struct LossReport {
    double recon = 0.0;
    double scene = 0.0;
    double total = 0.0;
    double lambda = 10.0;
};

// total = recon + lambda * scene
LossReport make_report(double recon, double scene, double lambda);

/// Mean absolute difference over all elements.
Var recon_loss(const Var& registered, const Var& fixed);

/// Mean squared difference of two scene feature maps.
Var scene_consistency_loss(const Var& scene_moving, const Var& scene_fixed);

/// Encodes both images with the scene encoder; gradients reach it through both branches.
Var scene_consistency_loss(RegistrationModel& model, Tape& tape, const Var& moving, const Var& fixed);

struct LossTerms {
    Var recon;
    Var scene;
    Var total;
    double lambda = 10.0;

    LossReport report() const;
};

/// Combines a forward pass with the fixed-image scene encoding. Reuses fwd.scene as S(I_m).
LossTerms total_loss(RegistrationModel& model, Tape& tape, const Var& fixed, const RegistrationForward& fwd,
                     double lambda = 10.0);

}  // namespace regfactor
