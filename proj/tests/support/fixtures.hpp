/*
 *  Copyright 2026 The MSEDenseNet Authors
 *
 *  Licensed under the Apache License, Version 2.0 (the "License");
 *  you may not use this file except in compliance with the License.
 *  You may obtain a copy of the License at
 *
 *      http://www.apache.org/licenses/LICENSE-2.0
 *
 *  Unless required by applicable law or agreed to in writing, software
 *  distributed under the License is distributed on an "AS IS" BASIS,
 *  WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 *  See the License for the specific language governing permissions and
 *  limitations under the License.
 */

#pragma once

#include <string>

#ifndef MSED_FIXTURE_DIR
#error "MSED_FIXTURE_DIR must point at tests/fixtures"
#endif

namespace msed::testing {
inline std::string fixture(const std::string& name) { return std::string(MSED_FIXTURE_DIR) + "/" + name; }
}  // namespace msed::testing
