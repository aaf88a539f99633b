"""Object-centric dynamic scene memory: voxel object maps with open-set
features, a relation graph kept fresh by local updates, and language-driven
navigation/manipulation planning on top.
"""

from .adaptation import (ChangeReport, Frame, Keyframe, RelocalizationResult,
                         RemovalThresholds, UpdateHooks, mark_obsolete_points,
                         relocalize, update_memory)
from .features import (FeatureError, RunningFeature, StubEmbedder,
                       feature_similarity, fuse_features, stub_embed)
from .geometry import (CameraIntrinsics, GeometryError, PointCloud, Pose,
                       VoxelGrid, adaptive_dbscan_filter, backproject_depth,
                       fit_floor_alignment, project_to_pixels,
                       rotation_about_z, rotation_from_axis_angle,
                       voxel_downsample)
from .harness import (LEVELS, HarnessConfig, TrialReport, compute_scda,
                      compute_sga, generate_scenario, run_locality_trial,
                      run_rebuild_equality_trial, run_scenario, run_suite,
                      summarize_reports)
from .navigation import (CELL_FREE, CELL_OCCUPIED, CELL_UNKNOWN, GraspProposal,
                         OccupancyGrid, OrientedBox, PlanningError, astar_path,
                         build_occupancy_grid, crop_around_target,
                         dijkstra_cost, heuristic_grasp_orientation,
                         oriented_box_from_cloud, place_height)
from .objectmap import (Detection, MapError, MapParams, ObjectMap, ObjectNode,
                        SimilarityWeights, associate_detections, build_map,
                        geometric_similarity, integrate_frame, load_map,
                        overall_similarity, save_map)
from .planning import (GroundingResult, InstructionError, Subtask, TargetQuery,
                       parse_instruction, render_subtasks, resolve_target)
from .registration import (IcpParams, IcpResult, RegistrationError, icp_refine)
from .scenegraph import (BELONG, FLOOR_ID, INSIDE, ON, GraphError,
                         NodeSummary, RelationParams, SceneGraph,
                         build_scene_graph, diff_graphs, graph_from_json,
                         graph_to_json, infer_relation, local_graph_update,
                         summarize_objects)
from .simworld import (EditEvent, RenderConfig, ScenarioScript, SceneObject,
                       apply_scene_edit, coarse_pose_estimate, gt_scene_graph,
                       lift_detections, load_scenario, look_at,
                       make_intrinsics, read_frame_dataset, render_frame,
                       render_rasters, save_scenario, write_frame_dataset)

__version__ = "0.1.0"
