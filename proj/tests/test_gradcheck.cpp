#include "doctest.h"
#include "neuropipe/gradcheck.hpp"

using namespace neuropipe;

TEST_CASE("whole-network gradients match central differences") {
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    const auto results = end_to_end_gradient_checks(seed);
    CHECK(results.size() == 4);
    for (const auto& r : results) {
      INFO(r.name << " seed " << seed << " error " << r.max_rel_error);
      MESSAGE(r.name << " seed " << seed << " max rel error " << r.max_rel_error);
      CHECK(r.checked > 0);
      CHECK(r.passed());
    }
  }
}

TEST_CASE("suite concatenates operator and network checks") {
  const auto all = run_gradient_suite(4);
  CHECK(all.size() == operator_gradient_checks(4).size() + 4);
  for (const auto& r : all) CHECK(r.passed());
}
