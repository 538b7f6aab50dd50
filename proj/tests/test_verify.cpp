#include <sstream>

#include <gtest/gtest.h>

#include "sgdstab/verify.hpp"

using namespace sgdstab;

TEST(Verify, KronSuitePasses) {
  const verify::Report r = verify::run(verify::Suite::Kron, {1, 10, verify::Fault::None});
  std::ostringstream os;
  r.print(os);
  EXPECT_TRUE(r.ok()) << os.str();
}

TEST(Verify, ThresholdsSuitePasses) {
  const verify::Report r = verify::run(verify::Suite::Thresholds, {2, 10, verify::Fault::None});
  std::ostringstream os;
  r.print(os);
  EXPECT_TRUE(r.ok()) << os.str();
}

TEST(Verify, MomentsSuitePasses) {
  const verify::Report r = verify::run(verify::Suite::Moments, {3, 10, verify::Fault::None});
  std::ostringstream os;
  r.print(os);
  EXPECT_TRUE(r.ok()) << os.str();
}

TEST(Verify, MixtureSuitePasses) {
  const verify::Report r = verify::run(verify::Suite::Mixture, {4, 5, verify::Fault::None});
  std::ostringstream os;
  r.print(os);
  EXPECT_TRUE(r.ok()) << os.str();
}

TEST(Verify, InjectedSignErrorIsCaughtAndNamed) {
  const verify::Report r = verify::run(verify::Suite::Thresholds, {1, 3, verify::Fault::QSign});
  EXPECT_FALSE(r.ok());
  bool named = false;
  for (const auto& p : r.properties)
    if (p.name == "thresholds.q_oracle_equality") {
      named = true;
      EXPECT_EQ(p.passed, 0);
    } else {
      EXPECT_TRUE(p.ok()) << p.name;
    }
  EXPECT_TRUE(named);
  std::ostringstream os;
  r.print(os);
  EXPECT_NE(os.str().find("FAIL thresholds.q_oracle_equality"), std::string::npos);
}

TEST(Verify, ParsesNames) {
  EXPECT_EQ(verify::parse_suite("all"), verify::Suite::All);
  EXPECT_THROW(verify::parse_suite("nope"), InvalidArgument);
  EXPECT_EQ(verify::parse_fault(""), verify::Fault::None);
  EXPECT_THROW(verify::parse_fault("other"), InvalidArgument);
}
