/**
 * three.js point-cloud view: orbit/zoom camera that persists across data
 * updates; only the geometry buffer changes when a new cloud arrives.
 */

import * as THREE from "three";
import { OrbitControls } from "three/examples/jsm/controls/OrbitControls.js";

export class CloudViewer {
  private renderer: THREE.WebGLRenderer;
  private scene: THREE.Scene;
  private camera: THREE.PerspectiveCamera;
  private controls: OrbitControls;
  private points: THREE.Points;
  private geometry: THREE.BufferGeometry;

  constructor(canvas: HTMLCanvasElement, width: number, height: number) {
    this.renderer = new THREE.WebGLRenderer({ canvas, antialias: true });
    this.renderer.setSize(width, height, false);
    this.scene = new THREE.Scene();
    this.scene.background = new THREE.Color(0x101218);

    this.camera = new THREE.PerspectiveCamera(40, width / height, 0.01, 100);
    this.camera.position.set(1.2, 0.9, 1.2);
    this.camera.lookAt(0, 0, 0);

    this.controls = new OrbitControls(this.camera, canvas);
    this.controls.enableDamping = true;

    this.geometry = new THREE.BufferGeometry();
    this.geometry.setAttribute("position", new THREE.BufferAttribute(new Float32Array(0), 3));
    const material = new THREE.PointsMaterial({ color: 0x7fd0ff, size: 0.015 });
    this.points = new THREE.Points(this.geometry, material);
    this.scene.add(this.points);
    this.scene.add(new THREE.AxesHelper(0.3));

    const loop = () => {
      this.controls.update();
      this.renderer.render(this.scene, this.camera);
      requestAnimationFrame(loop);
    };
    requestAnimationFrame(loop);
  }

  get renderedPointCount(): number {
    return this.geometry.getAttribute("position").count;
  }

  /** Replace the cloud; the camera pose is untouched. */
  setCloud(flatPoints: Float32Array): void {
    for (const v of flatPoints) {
      if (!Number.isFinite(v)) throw new Error("non-finite coordinates in cloud payload");
    }
    this.geometry.setAttribute("position", new THREE.BufferAttribute(flatPoints, 3));
    this.geometry.computeBoundingSphere();
  }

  setSize(width: number, height: number): void {
    this.renderer.setSize(width, height, false);
    this.camera.aspect = width / height;
    this.camera.updateProjectionMatrix();
  }
}
