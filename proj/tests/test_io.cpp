/*
 Copyright 2026 The hkoop Authors

 Licensed under the Apache License, Version 2.0 (the "License");
 you may not use this file except in compliance with the License.
 You may obtain a copy of the License at

      https://www.apache.org/licenses/LICENSE-2.0

 Unless required by applicable law or agreed to in writing, software
 distributed under the License is distributed on an "AS IS" BASIS,
 WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 See the License for the specific language governing permissions and
 limitations under the License.
*/

#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>
#include <sstream>

#include "hkoop/errors.hpp"
#include "hkoop/io.hpp"

using namespace hkoop;

TEST(Io, DoubleFormattingRoundTrips) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> dist(-1e6, 1e6);
  for (int i = 0; i < 1000; ++i) {
    double v = dist(rng) * std::pow(10.0, static_cast<double>(i % 20) - 10.0);
    EXPECT_EQ(io::parse_double(io::format_double(v)), v);
  }
  EXPECT_EQ(io::format_double(0.1), "0.1");
  EXPECT_EQ(io::format_double(-2.5), "-2.5");
}

TEST(Io, ParseRejectsGarbage) {
  EXPECT_THROW(io::parse_double("1.5x"), SchemaError);
  EXPECT_THROW(io::parse_double(""), SchemaError);
  EXPECT_THROW(io::parse_int("2.0"), SchemaError);
  EXPECT_EQ(io::parse_int(" 42 "), 42);
  EXPECT_TRUE(std::isnan(io::parse_double("nan")));
}

TEST(Io, CsvSkipsCommentsAndReportsLines) {
  std::istringstream ok("# meta\na,b\n1,2\n\n3,4\n");
  auto csv = io::read_csv(ok);
  ASSERT_EQ(csv.comments.size(), 1u);
  EXPECT_EQ(csv.comments[0], "meta");
  EXPECT_EQ(csv.rows.size(), 2u);
  EXPECT_EQ(csv.line_numbers[1], 5u);

  std::istringstream bad("a,b\n1,2\n3\n");
  try {
    io::read_csv(bad);
    FAIL() << "expected a schema error";
  } catch (const SchemaError& e) {
    EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos);
  }
}

TEST(Io, Fnv1aKnownVectors) {
  EXPECT_EQ(io::fnv1a_hex(""), "cbf29ce484222325");
  EXPECT_EQ(io::fnv1a_hex("a"), "af63dc4c8601ec8c");
}
