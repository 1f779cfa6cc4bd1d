// Library walk-through: phantoms, both training phases, fusion and metrics
// on a handful of small cases.

#include <iostream>

#include "l2s/config.hpp"
#include "l2s/metrics.hpp"
#include "l2s/phantom.hpp"
#include "l2s/pipeline.hpp"

int main() {
    using namespace l2s;
    configure_threads_from_env();

    PhantomSpec spec;
    spec.shape = {32, 48, 48};
    const auto cases = generate_dataset(spec, 20, 1);
    const std::vector<Case> train(cases.begin(), cases.begin() + 16), test(cases.begin() + 16, cases.end());

    LossConfig loss;
    loss.dice_per_sample = false;
    const PreprocessConfig pre;

    Phase1Config p1;
    p1.epochs = 60;
    p1.steps_per_epoch = 4;
    p1.batch = 8;
    p1.crop = {32, 48};
    p1.loss = loss;
    TrainResult m2d = train_phase1(train, p1, pre);

    std::vector<LocationCue> cues;
    for (const Case& c : train) cues.push_back(infer_cue(m2d.model, c, pre));

    Phase2Config p2;
    p2.epochs = 60;
    p2.steps_per_epoch = 4;
    p2.patch = {16, 32, 32};
    p2.model = {3, 2, 3, {8, 16, 32}, NormKind::layer};
    p2.loss = loss;
    TrainResult m3d = train_phase2(train, cues, p2, pre);

    const FusionConfig fusion;
    for (const Case& c : test) {
        const LocationCue cue = infer_cue(m2d.model, c, pre);
        const Volume prob = infer_3d(m3d.model, c, p2.patch, {}, pre);
        const Volume gt = label_or_empty(c);
        const CaseMetrics plain = evaluate_case(c.id, threshold(prob, 0.5), gt);
        const CaseMetrics fused = evaluate_case(c.id, fuse(prob, cue, fusion), gt);
        std::cout << c.id << "  plain dice " << plain.dice << " fpv " << plain.fpv_ml << "  fused dice " << fused.dice
                  << " fpv " << fused.fpv_ml << '\n';
    }
}
