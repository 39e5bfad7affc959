#include "regfactor/objective.hpp"

#include "regfactor/errors.hpp"
#include "regfactor/ops.hpp"

namespace regfactor {

LossReport make_report(double recon, double scene, double lambda) {
    return {recon, scene, recon + lambda * scene, lambda};
}

Var recon_loss(const Var& registered, const Var& fixed) {
    if (registered.shape() != fixed.shape()) {
        throw ShapeError("recon_loss: " + shape_str(registered.shape()) + " vs " + shape_str(fixed.shape()));
    }
    return mean_abs(sub(registered, fixed));
}

Var scene_consistency_loss(const Var& scene_moving, const Var& scene_fixed) {
    if (scene_moving.shape() != scene_fixed.shape()) {
        throw ShapeError("scene_consistency_loss: " + shape_str(scene_moving.shape()) + " vs " +
                         shape_str(scene_fixed.shape()));
    }
    return mean_sq(sub(scene_moving, scene_fixed));
}

Var scene_consistency_loss(RegistrationModel& model, Tape& tape, const Var& moving, const Var& fixed) {
    if (moving.shape() != fixed.shape()) {
        throw ShapeError("scene_consistency_loss: " + shape_str(moving.shape()) + " vs " + shape_str(fixed.shape()));
    }
    return scene_consistency_loss(model.scene_encode(tape, moving), model.scene_encode(tape, fixed));
}

LossReport LossTerms::report() const { return make_report(recon.item(), scene.item(), lambda); }

LossTerms total_loss(RegistrationModel& model, Tape& tape, const Var& fixed, const RegistrationForward& fwd,
                     double lambda) {
    LossTerms terms;
    terms.lambda = lambda;
    terms.recon = recon_loss(fwd.output, fixed);
    terms.scene = scene_consistency_loss(fwd.scene, model.scene_encode(tape, fixed));
    terms.total = add(terms.recon, scale(terms.scene, lambda));
    return terms;
}

}  // namespace regfactor
