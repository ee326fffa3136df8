#include "testing.hpp"

#include "checks.hpp"

TEST_CASE("library matches independent reference computations") {
  for (const auto& c : megl_test::derived_checks()) {
    INFO(c.line());
    CHECK(c.pass());
  }
}

TEST_CASE("autograd gradients match central differences") {
  for (const auto& c : megl_test::gradient_checks()) {
    INFO(c.line());
    CHECK(c.pass());
  }
}
