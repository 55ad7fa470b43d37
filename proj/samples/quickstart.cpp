// Generates a small synthetic dataset, trains the cascade, and classifies the
// held-out windows with both the float and the integer engine.
//
//   ./quickstart [config.json]

#include <iostream>

#include "mscrnn/config.hpp"
#include "mscrnn/metrics.hpp"

using namespace mscrnn;

int main(int argc, char** argv) try {
  RunConfig cfg = argc > 1 ? load_config(argv[1]) : parse_config(json::object());
  const auto ds = radar::generate_dataset(cfg.data, cfg.generator, data_seed(cfg));
  const auto train = radar::to_instance_sets(ds, radar::Split::train);
  const auto test = radar::to_instance_sets(ds, radar::Split::test);
  std::cout << "train " << train.size() << " windows, test " << test.size() << "\n";

  const auto res = train_msc(train, cfg.train);
  const auto m = evaluate(res.model, test);
  std::cout << "float accuracy " << m.accuracy << ", clutter recall " << m.recall[0]
            << ", upper tier invoked on " << m.upper_invocation_rate * 100 << "% of windows\n";

  const auto q = quant::quantize_model(res.model, quant::calibrate_scale_plan(res.model, train));
  const auto qm = summarize(infer_all(q, test), test, res.model.class_names);
  std::cout << "Q15 accuracy   " << qm.accuracy << "\n";
} catch (const Error& e) {
  std::cerr << "error: class=" << e.class_name() << " msg=" << e.what() << "\n";
  return static_cast<int>(e.error_class());
}
