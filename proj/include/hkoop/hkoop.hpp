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

#ifndef HKOOP_HKOOP_HPP
#define HKOOP_HKOOP_HPP

#include "hkoop/config.hpp"
#include "hkoop/datagen.hpp"
#include "hkoop/errors.hpp"
#include "hkoop/grid.hpp"
#include "hkoop/hybrid_core.hpp"
#include "hkoop/io.hpp"
#include "hkoop/koopman.hpp"
#include "hkoop/net.hpp"
#include "hkoop/rollout.hpp"
#include "hkoop/systems.hpp"
#include "hkoop/transform.hpp"

#endif // HKOOP_HKOOP_HPP
